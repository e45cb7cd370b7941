//! Question-gated merge of the branch outputs, the answer classifier, and
//! evaluation metrics.

use std::collections::HashMap;

use rand::Rng;

use crate::config::{CombineOp, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{parameter_block, uniform_init};
use crate::tensor::Tensor;
use crate::trainer::Dropout;

parameter_block! {
    /// Question gates for each branch and the linear classifier.
    HeadParameters / HeadVars {
        w_hr, b_hr,
        w_hd, b_hd,
        w_p, b_p,
    }
}

impl HeadParameters {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (gd, k) = (cfg.attended_dim(), cfg.hidden_dim);
        let (n, c) = (cfg.n_answers, cfg.combine_dim());
        HeadParameters {
            w_hr: uniform_init(&[gd, k], k, rng),
            b_hr: uniform_init(&[gd], k, rng),
            w_hd: uniform_init(&[gd, k], k, rng),
            b_hd: uniform_init(&[gd], k, rng),
            w_p: uniform_init(&[n, c], c, rng),
            b_p: uniform_init(&[n], c, rng),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (gd, k) = (cfg.attended_dim(), cfg.hidden_dim);
        let (n, c) = (cfg.n_answers, cfg.combine_dim());
        HeadParameters {
            w_hr: Tensor::zeros(&[gd, k]),
            b_hr: Tensor::zeros(&[gd]),
            w_hd: Tensor::zeros(&[gd, k]),
            b_hd: Tensor::zeros(&[gd]),
            w_p: Tensor::zeros(&[n, c]),
            b_p: Tensor::zeros(&[n]),
        }
    }
}

/// `v ∘ tanh(dropout(W q + b))`.
fn gate(g: &mut Graph, v: Var, q: Var, w: Var, b: Var, drop: &mut Dropout<'_>) -> Result<Var> {
    let lin = g.affine(q, w, b)?;
    let lin = drop.apply(g, lin)?;
    let t = g.tanh(lin);
    g.hadamard(v, t)
}

/// Gates each available attended feature `[B, G·d_c]` by the question
/// `[B, k]` and merges them per `cfg.combine`. With one branch present the
/// result is that branch's gated feature.
pub fn combine(
    g: &mut Graph,
    v1: Option<Var>,
    v2: Option<Var>,
    question: Var,
    p: &HeadVars,
    cfg: &ModelConfig,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let h_r = v1
        .map(|v| gate(g, v, question, p.w_hr, p.b_hr, drop))
        .transpose()?;
    let h_d = v2
        .map(|v| gate(g, v, question, p.w_hd, p.b_hd, drop))
        .transpose()?;
    match (h_r, h_d) {
        (Some(r), Some(d)) => match cfg.combine {
            CombineOp::Add => g.add(r, d),
            CombineOp::Mul => g.hadamard(r, d),
            CombineOp::Cat => g.concat_axis(&[r, d], 1),
        },
        (Some(h), None) | (None, Some(h)) => Ok(h),
        (None, None) => Err(Error::Config("both attention branches are disabled".into())),
    }
}

/// Answer logits `W_p h + b_p`, `[B, n_answers]`.
pub fn logits(g: &mut Graph, h: Var, p: &HeadVars) -> Result<Var> {
    g.affine(h, p.w_p, p.b_p)
}

/// Answer distribution `softmax(W_p h + b_p)`.
pub fn classify(g: &mut Graph, h: Var, p: &HeadVars) -> Result<Var> {
    let l = logits(g, h, p)?;
    g.softmax_axis(l, 1)
}

/// Mean negative log-likelihood of `targets` under `softmax(logits)`.
pub fn cross_entropy(g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, targets)
}

/// Lower-cased, trimmed form used for answer matching.
pub fn normalize_answer(answer: &str) -> String {
    answer.trim().to_lowercase()
}

/// Soft accuracy against human answers: `min(matches / 3, 1)`. A single
/// ground truth is scored by exact match.
pub fn vqa_accuracy(predicted: &str, ground_truths: &[String]) -> f64 {
    assert!(!ground_truths.is_empty(), "no ground-truth answers");
    let predicted = normalize_answer(predicted);
    let matches = ground_truths
        .iter()
        .filter(|gt| normalize_answer(gt) == predicted)
        .count();
    if ground_truths.len() == 1 {
        matches as f64
    } else {
        (matches as f64 / 3.0).min(1.0)
    }
}

/// The most common answer, ties broken by first occurrence.
pub fn most_frequent(answers: &[String]) -> Option<&str> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for a in answers {
        *counts.entry(normalize_answer(a)).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    answers
        .iter()
        .find(|a| counts[&normalize_answer(a)] == best)
        .map(String::as_str)
}

/// Candidate answers; position is the class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnswerVocabulary {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocabulary {
    pub fn new(answers: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(answers.len());
        for (i, a) in answers.iter().enumerate() {
            if index.insert(normalize_answer(a), i).is_some() {
                return Err(Error::Config(format!("duplicate answer `{a}`")));
            }
        }
        if answers.is_empty() {
            return Err(Error::Config("empty answer vocabulary".into()));
        }
        Ok(AnswerVocabulary { answers, index })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::to_owned).collect())
    }

    pub fn to_text(&self) -> String {
        self.answers.iter().map(|a| format!("{a}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn id(&self, answer: &str) -> Option<usize> {
        self.index.get(&normalize_answer(answer)).copied()
    }

    pub fn answer(&self, id: usize) -> Option<&str> {
        self.answers.get(id).map(String::as_str)
    }

    /// Class id of the most frequent ground-truth answer.
    pub fn target(&self, ground_truths: &[String]) -> Result<usize> {
        let top = most_frequent(ground_truths)
            .ok_or_else(|| Error::Config("sample has no answers".into()))?;
        self.id(top)
            .ok_or_else(|| Error::Config(format!("answer `{top}` not in the answer vocabulary")))
    }
}

/// Index of the highest probability, optionally restricted to `choices`.
pub fn argmax_answer(probs: &[f64], choices: Option<&[usize]>) -> usize {
    let candidates: Box<dyn Iterator<Item = usize>> = match choices {
        Some(c) if !c.is_empty() => Box::new(c.iter().copied()),
        _ => Box::new(0..probs.len()),
    };
    candidates
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if probs[b] >= probs[i] => Some(b),
            _ => Some(i),
        })
        .expect("at least one candidate")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::config::Branches;

    fn strings(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn accuracy_rule() {
        let ten_yes = strings(&["yes"; 10]);
        assert_eq!(vqa_accuracy("yes", &ten_yes), 1.0);
        assert_eq!(vqa_accuracy("no", &ten_yes), 0.0);
        let mut two = strings(&["no"; 10]);
        two[0] = "yes".into();
        two[5] = " YES".into();
        assert!((vqa_accuracy("yes", &two) - 2.0 / 3.0).abs() < 1e-15);
        let mut five = strings(&["no"; 10]);
        five[..5].iter_mut().for_each(|a| *a = "two".into());
        assert_eq!(vqa_accuracy("two", &five), 1.0);
        assert_eq!(vqa_accuracy("cat", &strings(&["cat"])), 1.0);
        assert_eq!(vqa_accuracy("dog", &strings(&["cat"])), 0.0);
    }

    #[test]
    fn most_frequent_breaks_ties_by_order() {
        assert_eq!(most_frequent(&strings(&["a", "b", "b", "a"])), Some("a"));
        assert_eq!(most_frequent(&strings(&["a", "b", "b"])), Some("b"));
        assert_eq!(most_frequent(&[]), None);
    }

    #[test]
    fn answer_vocabulary() {
        let v = AnswerVocabulary::parse("yes\nno\n2\n").unwrap();
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("No"), Some(1));
        assert_eq!(v.target(&strings(&["2", "2", "no"])).unwrap(), 2);
        assert!(v.target(&strings(&["maybe"])).is_err());
        assert!(AnswerVocabulary::parse("yes\nyes\n").is_err());
        assert_eq!(AnswerVocabulary::parse(&v.to_text()).unwrap(), v);
    }

    #[test]
    fn zero_gates_give_zero_combination() {
        let cfg = ModelConfig::tiny();
        let p = HeadParameters::zeros(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let v1 = g.constant(uniform_init(&[1, 14], 1, &mut rng));
        let v2 = g.constant(uniform_init(&[1, 14], 1, &mut rng));
        let q = g.constant(uniform_init(&[1, 8], 1, &mut rng));
        let h = combine(
            &mut g,
            Some(v1),
            Some(v2),
            q,
            &vars,
            &cfg,
            &mut Dropout::disabled(),
        )
        .unwrap();
        assert!(g.value(h).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_branch_passes_gated_feature_through() {
        let cfg = ModelConfig {
            branches: Branches::RegionOnly,
            ..ModelConfig::tiny()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = HeadParameters::init(&cfg, &mut rng);
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let v1 = g.constant(uniform_init(&[1, 14], 1, &mut rng));
        let q = g.constant(uniform_init(&[1, 8], 1, &mut rng));
        let h = combine(
            &mut g,
            Some(v1),
            None,
            q,
            &vars,
            &cfg,
            &mut Dropout::disabled(),
        )
        .unwrap();
        let expected = gate(
            &mut g,
            v1,
            q,
            vars.w_hr,
            vars.b_hr,
            &mut Dropout::disabled(),
        )
        .unwrap();
        assert_eq!(g.value(h), g.value(expected));
        assert!(combine(&mut g, None, None, q, &vars, &cfg, &mut Dropout::disabled()).is_err());
    }

    #[test]
    fn classify_examples() {
        let cfg = ModelConfig::tiny();
        let mut p = HeadParameters::zeros(&cfg);
        let mut g = Graph::new();
        let h = g.constant(Tensor::ones(&[1, 14]));
        let vars = p.bind(&mut g);
        let probs = classify(&mut g, h, &vars).unwrap();
        assert!(g
            .value(probs)
            .data()
            .iter()
            .all(|v| (v - 1.0 / 6.0).abs() < 1e-15));

        p.b_p.data_mut()[3] = 100.0;
        let vars = p.bind(&mut g);
        let probs = classify(&mut g, h, &vars).unwrap();
        let v = g.value(probs).data();
        assert!((v[3] - 1.0).abs() < 1e-15);
        assert!(v.iter().enumerate().all(|(i, &x)| i == 3 || x < 1e-43));
    }

    #[test]
    fn argmax_respects_choices() {
        let probs = [0.1, 0.5, 0.3, 0.1];
        assert_eq!(argmax_answer(&probs, None), 1);
        assert_eq!(argmax_answer(&probs, Some(&[0, 2, 3])), 2);
        assert_eq!(argmax_answer(&[0.25; 4], None), 0);
    }
}
