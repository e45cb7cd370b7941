//! Scalar-loop reference implementation of the full forward pass, written
//! independently of the tensor graph. Everything works on plain `Vec<f64>`
//! with explicit index arithmetic.

#![allow(dead_code, clippy::needless_range_loop)]

use dual_mfa::attention::BranchParameters;
use dual_mfa::data::VqaInstance;
use dual_mfa::head::HeadParameters;
use dual_mfa::question::GruParameters;
use dual_mfa::{CombineOp, DualMfaParameters, FusionOp, ModelConfig, Normalization, Tensor};

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// tanh through the exponential identity, so the oracle does not share
/// `f64::tanh` with the library.
pub fn tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum() * (1.0 - 2.0 * (-2.0 * x.abs()).exp());
    }
    let e = (2.0 * x).exp();
    (e - 1.0) / (e + 1.0)
}

/// `W x + b` for a row-major `W` of shape `[rows, cols]`.
pub fn affine(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(cols, x.len());
    let mut out = vec![0.0; rows];
    for i in 0..rows {
        let mut acc = b.data()[i];
        for j in 0..cols {
            acc += w.data()[i * cols + j] * x[j];
        }
        out[i] = acc;
    }
    out
}

pub fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let zero = Tensor::zeros(&[w.shape()[0]]);
    affine(w, &zero, x)
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in x {
        if v > max {
            max = v;
        }
    }
    let mut out = Vec::with_capacity(x.len());
    let mut total = 0.0;
    for &v in x {
        let e = (v - max).exp();
        out.push(e);
        total += e;
    }
    for v in &mut out {
        *v /= total;
    }
    out
}

/// One GRU step.
pub fn gru_step(p: &GruParameters, x: &[f64], h: &[f64]) -> Vec<f64> {
    let k = h.len();
    let wz = affine(&p.w_z, &p.b_z, x);
    let wr = affine(&p.w_r, &p.b_r, x);
    let wh = affine(&p.w_h, &p.b_h, x);
    let uz = matvec(&p.u_z, h);
    let ur = matvec(&p.u_r, h);
    let mut z = vec![0.0; k];
    let mut r = vec![0.0; k];
    for i in 0..k {
        z[i] = sigmoid(wz[i] + uz[i]);
        r[i] = sigmoid(wr[i] + ur[i]);
    }
    let rh: Vec<f64> = (0..k).map(|i| r[i] * h[i]).collect();
    let uh = matvec(&p.u_h, &rh);
    let mut out = vec![0.0; k];
    for i in 0..k {
        let cand = tanh(wh[i] + uh[i]);
        out[i] = z[i] * h[i] + (1.0 - z[i]) * cand;
    }
    out
}

/// Embedding column of token `id`.
pub fn embedding(p: &GruParameters, id: usize) -> Vec<f64> {
    let (e, v) = (p.w_e.shape()[0], p.w_e.shape()[1]);
    (0..e).map(|i| p.w_e.data()[i * v + id]).collect()
}

pub fn encode(p: &GruParameters, ids: &[usize]) -> Vec<f64> {
    let k = p.u_z.shape()[0];
    let mut h = vec![0.0; k];
    for &id in ids {
        h = gru_step(p, &embedding(p, id), &h);
    }
    h
}

/// Grid cells as `[cell][channel]`, reading the `[C, H, W]` layout.
pub fn grid_locations(inst: &VqaInstance) -> Vec<Vec<f64>> {
    let v = &inst.image.values;
    let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let mut out = vec![vec![0.0; c]; h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[y * w + x][ch] = v.data()[(ch * h + y) * w + x];
            }
        }
    }
    out
}

/// Boxes as `[box][channel]`, reading the `[C, N]` layout.
pub fn box_locations(inst: &VqaInstance) -> Vec<Vec<f64>> {
    let v = &inst.detections.values;
    let (c, n) = (v.shape()[0], v.shape()[1]);
    let mut out = vec![vec![0.0; c]; n];
    for ch in 0..c {
        for b in 0..n {
            out[b][ch] = v.data()[ch * n + b];
        }
    }
    out
}

fn project_all(w: &Tensor, b: &Tensor, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| affine(w, b, r).into_iter().map(tanh).collect())
        .collect()
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= rows.len() as f64;
    }
    out
}

pub fn normalize(x: &[f64], cfg: &ModelConfig) -> Vec<f64> {
    match cfg.normalization {
        Normalization::L2 => {
            let mut sq = 0.0;
            for v in x {
                sq += v * v;
            }
            let n = sq.sqrt().max(cfg.l2_eps);
            x.iter().map(|v| v / n).collect()
        }
        Normalization::Power => x.iter().map(|v| v.abs().powf(1.0 / 3.0)).collect(),
        Normalization::None => x.to_vec(),
    }
}

/// One branch evaluated by loops.
#[derive(Clone, Debug)]
pub struct BranchOracle {
    /// Projected features of the attended modality, `[L][d_c]`.
    pub local: Vec<Vec<f64>>,
    /// Normalized joint embedding, `[L][d_c]`.
    pub joint: Vec<Vec<f64>>,
    /// Attention weights, `[G][L]`.
    pub weights: Vec<Vec<f64>>,
    /// Attended vector, glimpse-major, `G·d_c`.
    pub pooled: Vec<f64>,
}

/// `attended` is the modality attention runs over; `context` is averaged.
pub fn branch(
    p: &BranchParameters,
    cfg: &ModelConfig,
    q: &[f64],
    attended_is_grid: bool,
    grid: &[Vec<f64>],
    boxes: &[Vec<f64>],
) -> BranchOracle {
    let r = project_all(&p.w_r, &p.b_r, grid);
    let d = project_all(&p.w_d, &p.b_d, boxes);
    let qp: Vec<f64> = affine(&p.w_q, &p.b_q, q).into_iter().map(tanh).collect();
    let (local, context) = if attended_is_grid {
        (r, mean_rows(&d))
    } else {
        (d, mean_rows(&r))
    };
    let dc = cfg.common_dim;
    let joint: Vec<Vec<f64>> = local
        .iter()
        .map(|l| {
            let fused: Vec<f64> = (0..dc)
                .map(|i| match cfg.fusion {
                    FusionOp::Mul => qp[i] * l[i] * context[i],
                    FusionOp::Add => qp[i] + l[i] + context[i],
                })
                .collect();
            normalize(&fused, cfg)
        })
        .collect();

    let glimpses = cfg.glimpses;
    let mut weights = Vec::with_capacity(glimpses);
    let mut pooled = Vec::with_capacity(glimpses * dc);
    for g in 0..glimpses {
        let logits: Vec<f64> = joint
            .iter()
            .map(|c| {
                let mut acc = p.b_c.data()[g];
                for i in 0..dc {
                    acc += p.w_c.data()[g * dc + i] * c[i];
                }
                acc
            })
            .collect();
        let a = softmax(&logits);
        for i in 0..dc {
            let mut acc = 0.0;
            for (l, row) in local.iter().enumerate() {
                acc += a[l] * row[i];
            }
            pooled.push(acc);
        }
        weights.push(a);
    }
    BranchOracle {
        local,
        joint,
        weights,
        pooled,
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOracle {
    pub question: Vec<f64>,
    pub region: Option<BranchOracle>,
    pub detection: Option<BranchOracle>,
    pub combined: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

fn gated(v: &[f64], w: &Tensor, b: &Tensor, q: &[f64]) -> Vec<f64> {
    let gate = affine(w, b, q);
    v.iter().zip(gate).map(|(x, t)| x * tanh(t)).collect()
}

pub fn head(
    p: &HeadParameters,
    cfg: &ModelConfig,
    v1: Option<&[f64]>,
    v2: Option<&[f64]>,
    q: &[f64],
) -> Vec<f64> {
    let hr = v1.map(|v| gated(v, &p.w_hr, &p.b_hr, q));
    let hd = v2.map(|v| gated(v, &p.w_hd, &p.b_hd, q));
    match (hr, hd) {
        (Some(r), Some(d)) => match cfg.combine {
            CombineOp::Add => r.iter().zip(&d).map(|(a, b)| a + b).collect(),
            CombineOp::Mul => r.iter().zip(&d).map(|(a, b)| a * b).collect(),
            CombineOp::Cat => r.into_iter().chain(d).collect(),
        },
        (Some(h), None) | (None, Some(h)) => h,
        (None, None) => panic!("no branch"),
    }
}

pub fn forward(params: &DualMfaParameters, cfg: &ModelConfig, inst: &VqaInstance) -> ForwardOracle {
    let q = encode(&params.gru, inst.question.ids());
    let grid = grid_locations(inst);
    let boxes = box_locations(inst);
    let region = cfg
        .branches
        .region()
        .then(|| branch(&params.region, cfg, &q, true, &grid, &boxes));
    let detection = cfg
        .branches
        .detection()
        .then(|| branch(&params.detection, cfg, &q, false, &grid, &boxes));
    let combined = head(
        &params.head,
        cfg,
        region.as_ref().map(|b| b.pooled.as_slice()),
        detection.as_ref().map(|b| b.pooled.as_slice()),
        &q,
    );
    let logits = affine(&params.head.w_p, &params.head.b_p, &combined);
    let probs = softmax(&logits);
    ForwardOracle {
        question: q,
        region,
        detection,
        combined,
        logits,
        probs,
    }
}

/// Mean negative log-likelihood of the targets.
pub fn loss(
    params: &DualMfaParameters,
    cfg: &ModelConfig,
    instances: &[VqaInstance],
    targets: &[usize],
) -> f64 {
    let mut total = 0.0;
    for (inst, &t) in instances.iter().zip(targets) {
        let logits = forward(params, cfg, inst).logits;
        let mut max = f64::NEG_INFINITY;
        for &l in &logits {
            max = max.max(l);
        }
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[t];
    }
    total / instances.len() as f64
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// All 18 fusion × normalization × combine settings on top of `base`.
pub fn ablation_grid(base: &ModelConfig) -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for fusion in [FusionOp::Mul, FusionOp::Add] {
        for normalization in [Normalization::L2, Normalization::Power, Normalization::None] {
            for combine in [CombineOp::Add, CombineOp::Mul, CombineOp::Cat] {
                out.push(ModelConfig {
                    fusion,
                    normalization,
                    combine,
                    ..base.clone()
                });
            }
        }
    }
    out
}
