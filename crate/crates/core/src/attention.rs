//! The two co-attention branches.
//!
//! Both branches project the question, the image grid and the detection boxes
//! into a common space, fuse all three at every location of the attended map,
//! normalize, and pool the attended map with a softmax per glimpse. The
//! region branch attends over grid cells and averages the boxes; the
//! detection branch attends over boxes and averages the grid.
//!
//! Batched layouts: the grid enters as rows `[B·HW, C_r]` (cell-major per
//! sample) and the boxes as rows `[B·N_d, C_d]`. Per-location tensors are
//! `[B, L, d_c]` and attention maps `[B, L, G]`.

use rand::Rng;

use crate::config::{FusionOp, ModelConfig, Normalization};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{parameter_block, uniform_init};
use crate::tensor::Tensor;
use crate::trainer::Dropout;

/// Whole-image grid feature, `[C_r, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeature {
    pub values: Tensor,
}

impl ImageFeature {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 || !values.is_finite() {
            return Err(Error::InvalidTensor(format!(
                "image feature must be a finite [C, H, W] tensor, got {:?}",
                values.shape()
            )));
        }
        Ok(ImageFeature { values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cells(&self) -> usize {
        self.values.shape()[1] * self.values.shape()[2]
    }
}

/// Detection-box features, `[C_d, N_d]`; column `j` describes box `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionFeature {
    pub values: Tensor,
}

impl DetectionFeature {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 || !values.is_finite() {
            return Err(Error::InvalidTensor(format!(
                "detection feature must be a finite [C, N] tensor, got {:?}",
                values.shape()
            )));
        }
        Ok(DetectionFeature { values })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn boxes(&self) -> usize {
        self.values.shape()[1]
    }
}

parameter_block! {
    /// Projections of one branch into the `d_c`-dimensional common space and
    /// the per-location map from `d_c` channels to `G` glimpse logits.
    BranchParameters / BranchVars {
        w_r, b_r,
        w_d, b_d,
        w_q, b_q,
        w_c, b_c,
    }
}

impl BranchParameters {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (dc, g) = (cfg.common_dim, cfg.glimpses);
        BranchParameters {
            w_r: uniform_init(&[dc, cfg.image_channels], cfg.image_channels, rng),
            b_r: uniform_init(&[dc], cfg.image_channels, rng),
            w_d: uniform_init(&[dc, cfg.det_channels], cfg.det_channels, rng),
            b_d: uniform_init(&[dc], cfg.det_channels, rng),
            w_q: uniform_init(&[dc, cfg.hidden_dim], cfg.hidden_dim, rng),
            b_q: uniform_init(&[dc], cfg.hidden_dim, rng),
            w_c: uniform_init(&[g, dc], dc, rng),
            b_c: uniform_init(&[g], dc, rng),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (dc, g) = (cfg.common_dim, cfg.glimpses);
        BranchParameters {
            w_r: Tensor::zeros(&[dc, cfg.image_channels]),
            b_r: Tensor::zeros(&[dc]),
            w_d: Tensor::zeros(&[dc, cfg.det_channels]),
            b_d: Tensor::zeros(&[dc]),
            w_q: Tensor::zeros(&[dc, cfg.hidden_dim]),
            b_q: Tensor::zeros(&[dc]),
            w_c: Tensor::zeros(&[g, dc]),
            b_c: Tensor::zeros(&[g]),
        }
    }
}

/// Graph inputs shared by both branches.
#[derive(Clone, Copy, Debug)]
pub struct BranchInputs {
    /// Question embedding `[B, k]`.
    pub question: Var,
    /// Grid rows `[B·HW, C_r]`.
    pub image: Var,
    /// Box rows `[B·N_d, C_d]`.
    pub detections: Var,
    pub batch: usize,
}

/// Projected per-location features and their fused, normalized form.
#[derive(Clone, Copy, Debug)]
pub struct Fusion {
    /// `[B, L, d_c]`: R1 for the region branch, D2 for the detection branch.
    pub local: Var,
    /// `[B, L, d_c]`: C1 or C2.
    pub joint: Var,
}

/// Attention weights `[B, L, G]` and the attended feature `[B, G·d_c]`.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub weights: Var,
    pub pooled: Var,
}

/// Per-sample attention maps and attended vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult {
    /// `[G, H·W]`, present when the region branch is active.
    pub a1: Option<Tensor>,
    /// `[G, N_d]`, present when the detection branch is active.
    pub a2: Option<Tensor>,
    /// `[G·d_c]`.
    pub v1: Option<Tensor>,
    /// `[G·d_c]`.
    pub v2: Option<Tensor>,
}

/// `tanh(dropout(x · wᵀ + b))` reshaped to `[B, L, d_c]`.
fn project(
    g: &mut Graph,
    rows: Var,
    w: Var,
    b: Var,
    batch: usize,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let lin = g.affine(rows, w, b)?;
    let lin = drop.apply(g, lin)?;
    let act = g.tanh(lin);
    let (n, dc) = (g.shape(act)[0], g.shape(act)[1]);
    if n % batch != 0 {
        return Err(Error::shape("project", &[n, dc], &[batch]));
    }
    g.reshape(act, &[batch, n / batch, dc])
}

/// Fuses the projected question, the per-location features and the averaged
/// context, then normalizes over the channel axis at each location.
fn joint_embedding(
    g: &mut Graph,
    question: Var,
    local: Var,
    context: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let locations = g.shape(local)[1];
    let q = g.replicate_axis(question, 1, locations)?;
    let c = g.replicate_axis(context, 1, locations)?;
    let fused = match cfg.fusion {
        FusionOp::Mul => {
            let qr = g.hadamard(q, local)?;
            g.hadamard(qr, c)?
        }
        FusionOp::Add => {
            let qr = g.add(q, local)?;
            g.add(qr, c)?
        }
    };
    normalize(g, fused, cfg)
}

/// Applies the configured normalization to `[B, L, d_c]` features.
pub fn normalize(g: &mut Graph, fused: Var, cfg: &ModelConfig) -> Result<Var> {
    match cfg.normalization {
        Normalization::L2 => g.l2_normalize_axes(fused, &[2], cfg.l2_eps),
        Normalization::Power => Ok(g.power_normalize(fused)),
        Normalization::None => Ok(fused),
    }
}

/// Softmax over locations of the per-location glimpse logits, then the
/// attention-weighted sum of `local` for every glimpse.
fn attend(g: &mut Graph, joint: Var, local: Var, w_c: Var, b_c: Var) -> Result<Attended> {
    let shape = g.shape(joint).to_vec();
    let (batch, locations, dc) = (shape[0], shape[1], shape[2]);
    let rows = g.reshape(joint, &[batch * locations, dc])?;
    let logits = g.affine(rows, w_c, b_c)?;
    let glimpses = g.shape(logits)[1];
    let logits = g.reshape(logits, &[batch, locations, glimpses])?;
    let weights = g.softmax_axis(logits, 1)?;
    // [B, G, L] x [B, L, d_c]; glimpse 0 comes first in the flattened vector.
    let pooled = g.matmul_tn(weights, local)?;
    let pooled = g.reshape(pooled, &[batch, glimpses * dc])?;
    Ok(Attended { weights, pooled })
}

/// Region branch fusion: C1 over the grid cells.
pub fn fuse_region(
    g: &mut Graph,
    inputs: &BranchInputs,
    p: &BranchVars,
    cfg: &ModelConfig,
    drop: &mut Dropout<'_>,
) -> Result<Fusion> {
    let b = inputs.batch;
    let local = project(g, inputs.image, p.w_r, p.b_r, b, drop)?;
    let boxes = project(g, inputs.detections, p.w_d, p.b_d, b, drop)?;
    let context = g.mean_axis(boxes, 1)?;
    let question = project(g, inputs.question, p.w_q, p.b_q, b, drop)?;
    let question = g.reshape(question, &[b, cfg.common_dim])?;
    let joint = joint_embedding(g, question, local, context, cfg)?;
    Ok(Fusion { local, joint })
}

/// Region branch attention: a1 over cells and v1.
pub fn attend_region(g: &mut Graph, fusion: &Fusion, p: &BranchVars) -> Result<Attended> {
    attend(g, fusion.joint, fusion.local, p.w_c, p.b_c)
}

/// Detection branch fusion: C2 over the boxes.
pub fn fuse_detection(
    g: &mut Graph,
    inputs: &BranchInputs,
    p: &BranchVars,
    cfg: &ModelConfig,
    drop: &mut Dropout<'_>,
) -> Result<Fusion> {
    let b = inputs.batch;
    let local = project(g, inputs.detections, p.w_d, p.b_d, b, drop)?;
    let cells = project(g, inputs.image, p.w_r, p.b_r, b, drop)?;
    let context = g.mean_axis(cells, 1)?;
    let question = project(g, inputs.question, p.w_q, p.b_q, b, drop)?;
    let question = g.reshape(question, &[b, cfg.common_dim])?;
    let joint = joint_embedding(g, question, local, context, cfg)?;
    Ok(Fusion { local, joint })
}

/// Detection branch attention: a2 over boxes and v2.
pub fn attend_detection(g: &mut Graph, fusion: &Fusion, p: &BranchVars) -> Result<Attended> {
    attend(g, fusion.joint, fusion.local, p.w_c, p.b_c)
}

/// Grid rows `[HW, C_r]` of one image (cell-major, row-major over H×W).
pub fn image_rows(image: &ImageFeature) -> Vec<f64> {
    let (c, cells) = (image.channels(), image.cells());
    let src = image.values.data();
    let mut out = vec![0.0; c * cells];
    for ch in 0..c {
        for cell in 0..cells {
            out[cell * c + ch] = src[ch * cells + cell];
        }
    }
    out
}

/// Box rows `[N_d, C_d]` of one detection set.
pub fn detection_rows(det: &DetectionFeature) -> Vec<f64> {
    det.values.transpose2().into_data()
}
