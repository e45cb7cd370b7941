//! Question encoding: word embedding followed by a GRU whose final hidden
//! state is the question embedding.

use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{parameter_block, uniform_init};
use crate::tensor::Tensor;

/// Token id reserved for padding.
pub const PAD_ID: usize = 0;
pub const PAD_TOKEN: &str = "<pad>";

parameter_block! {
    /// Embedding table and GRU weights.
    ///
    /// Update gate `z`, reset gate `r` and candidate state `h` each have an
    /// input map `w_*` (`hidden × embed`), a recurrent map `u_*`
    /// (`hidden × hidden`) and a bias.
    GruParameters / GruVars {
        /// `embed × vocab`; column `i` is the vector of token `i`.
        w_e,
        w_z, w_r, w_h,
        u_z, u_r, u_h,
        b_z, b_r, b_h,
    }
}

impl GruParameters {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (e, k, v) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size);
        GruParameters {
            w_e: uniform_init(&[e, v], v, rng),
            w_z: uniform_init(&[k, e], e, rng),
            w_r: uniform_init(&[k, e], e, rng),
            w_h: uniform_init(&[k, e], e, rng),
            u_z: uniform_init(&[k, k], k, rng),
            u_r: uniform_init(&[k, k], k, rng),
            u_h: uniform_init(&[k, k], k, rng),
            b_z: uniform_init(&[k], k, rng),
            b_r: uniform_init(&[k], k, rng),
            b_h: uniform_init(&[k], k, rng),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (e, k, v) = (cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size);
        GruParameters {
            w_e: Tensor::zeros(&[e, v]),
            w_z: Tensor::zeros(&[k, e]),
            w_r: Tensor::zeros(&[k, e]),
            w_h: Tensor::zeros(&[k, e]),
            u_z: Tensor::zeros(&[k, k]),
            u_r: Tensor::zeros(&[k, k]),
            u_h: Tensor::zeros(&[k, k]),
            b_z: Tensor::zeros(&[k]),
            b_r: Tensor::zeros(&[k]),
            b_h: Tensor::zeros(&[k]),
        }
    }
}

/// A question padded at the tail to the configured length.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
    pad_len: usize,
}

impl TokenSequence {
    /// Pads `tokens` with [`PAD_ID`] up to `len`.
    pub fn new(tokens: &[usize], len: usize, vocab_size: usize) -> Result<Self> {
        if tokens.len() > len {
            return Err(Error::Config(format!(
                "question has {} tokens, maximum is {len}",
                tokens.len()
            )));
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::Vocabulary {
                id,
                size: vocab_size,
            });
        }
        let mut ids = tokens.to_vec();
        ids.resize(len, PAD_ID);
        Ok(TokenSequence {
            ids,
            pad_len: len - tokens.len(),
        })
    }

    /// All `T` ids including padding.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn pad_len(&self) -> usize {
        self.pad_len
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Token vocabulary; line number is token id and id 0 is `<pad>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(PAD_TOKEN) {
            return Err(Error::Config(format!(
                "vocabulary must start with `{PAD_TOKEN}`"
            )));
        }
        Ok(Vocabulary { tokens })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::to_owned).collect())
    }

    pub fn to_text(&self) -> String {
        self.tokens.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }
}

/// Embedding rows `[T, embed]` for one sequence.
pub fn embed(g: &mut Graph, p: &GruVars, seq: &TokenSequence) -> Result<Var> {
    g.gather_columns(p.w_e, seq.ids())
}

/// One GRU update:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + U_h (r ∘ h) + b_h)
/// h' = z ∘ h + (1 - z) ∘ h~
/// ```
///
/// `x` is `[B, embed]` and `h_prev` is `[B, hidden]`; unbatched vectors are
/// accepted as well.
pub fn gru_step(g: &mut Graph, p: &GruVars, x: Var, h_prev: Var) -> Result<Var> {
    let unbatched = g.shape(x).len() == 1;
    let (x, h_prev) = if unbatched {
        let xs = g.shape(x).to_vec();
        let hs = g.shape(h_prev).to_vec();
        if hs.len() != 1 {
            return Err(Error::shape("gru_step", &xs, &hs));
        }
        (g.reshape(x, &[1, xs[0]])?, g.reshape(h_prev, &[1, hs[0]])?)
    } else {
        (x, h_prev)
    };

    let gate = |g: &mut Graph, w: Var, u: Var, b: Var, h: Var| -> Result<Var> {
        let wx = g.affine(x, w, b)?;
        let uh = g.matmul_nt(h, u)?;
        g.add(wx, uh)
    };
    let z_pre = gate(g, p.w_z, p.u_z, p.b_z, h_prev)?;
    let z = g.sigmoid(z_pre);
    let r_pre = gate(g, p.w_r, p.u_r, p.b_r, h_prev)?;
    let r = g.sigmoid(r_pre);
    let reset = g.hadamard(r, h_prev)?;
    let cand_pre = gate(g, p.w_h, p.u_h, p.b_h, reset)?;
    let candidate = g.tanh(cand_pre);
    // z ∘ h + (1 - z) ∘ h~  ==  h~ + z ∘ (h - h~)
    let diff = g.sub(h_prev, candidate)?;
    let gated = g.hadamard(z, diff)?;
    let h = g.add(candidate, gated)?;

    if unbatched {
        let k = g.shape(h)[1];
        g.reshape(h, &[k])
    } else {
        Ok(h)
    }
}

/// Final hidden state `[B, hidden]` after consuming every position,
/// padding included, from a zero initial state.
pub fn encode(g: &mut Graph, p: &GruVars, questions: &[TokenSequence]) -> Result<Var> {
    let first = questions
        .first()
        .ok_or_else(|| Error::InvalidTensor("encode called with no questions".into()))?;
    let steps = first.len();
    if questions.iter().any(|q| q.len() != steps) {
        return Err(Error::Config(
            "questions in a batch must share one length".into(),
        ));
    }
    let hidden = g.shape(p.u_z)[0];
    let mut h = g.constant(Tensor::zeros(&[questions.len(), hidden]));
    let mut ids = Vec::with_capacity(questions.len());
    for t in 0..steps {
        ids.clear();
        ids.extend(questions.iter().map(|q| q.ids()[t]));
        let x = g.gather_columns(p.w_e, &ids)?;
        h = gru_step(g, p, x, h)?;
    }
    Ok(h)
}
