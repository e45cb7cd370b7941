//! Dataset-level accuracy with a per-question-type breakdown.

use std::collections::BTreeMap;
use std::fmt;

use crate::config::ModelConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::head::{argmax_answer, vqa_accuracy};
use crate::model::{predict, DualMfaParameters};

/// Accumulated accuracy for one group of questions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Tally {
    pub count: usize,
    pub score: f64,
}

impl Tally {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.score / self.count as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub per_type: BTreeMap<String, Tally>,
    /// Predicted class id of every sample.
    pub predictions: Vec<usize>,
}

impl EvalReport {
    pub fn total(&self) -> Tally {
        self.per_type
            .values()
            .fold(Tally::default(), |acc, t| Tally {
                count: acc.count + t.count,
                score: acc.score + t.score,
            })
    }

    pub fn overall(&self) -> f64 {
        self.total().accuracy()
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let total = self.total();
        writeln!(
            f,
            "overall accuracy {:.4} (n={})",
            total.accuracy(),
            total.count
        )?;
        for (kind, t) in &self.per_type {
            writeln!(f, "{kind:>10} accuracy {:.4} (n={})", t.accuracy(), t.count)?;
        }
        Ok(())
    }
}

/// Scores every sample with the VQA accuracy rule. In multiple-choice mode
/// the prediction is restricted to each sample's choice set.
pub fn evaluate(
    params: &DualMfaParameters,
    cfg: &ModelConfig,
    dataset: &Dataset,
    multiple_choice: bool,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let probs = predict(params, cfg, &dataset.instances)?;
    let mut report = EvalReport::default();
    for (inst, p) in dataset.instances.iter().zip(&probs) {
        let choices: Option<Vec<usize>> = match (&inst.choices, multiple_choice) {
            (Some(c), true) => Some(c.iter().filter_map(|a| dataset.answers.id(a)).collect()),
            _ => None,
        };
        let predicted = argmax_answer(p, choices.as_deref());
        let answer = dataset.answers.answer(predicted).unwrap_or_default();
        let tally = report
            .per_type
            .entry(inst.question_type().to_owned())
            .or_default();
        tally.count += 1;
        tally.score += vqa_accuracy(answer, &inst.answers);
        report.predictions.push(predicted);
    }
    Ok(report)
}
