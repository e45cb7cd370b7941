//! The complete dual-branch model: question encoder, region and detection
//! attention branches, and the answer head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attend_detection, attend_region, detection_rows, fuse_detection, fuse_region, image_rows,
    Attended, AttentionResult, BranchInputs, BranchParameters, BranchVars, Fusion,
};
use crate::config::ModelConfig;
use crate::data::VqaInstance;
use crate::error::{Error, Result};
use crate::gradcheck::relative_error;
use crate::graph::{Graph, Var};
use crate::head::{self, HeadParameters, HeadVars};
use crate::question::{self, GruParameters, GruVars, TokenSequence};
use crate::tensor::Tensor;
use crate::trainer::Dropout;

/// Every learnable tensor, grouped by component. The two branches never
/// share parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DualMfaParameters {
    pub gru: GruParameters,
    pub region: BranchParameters,
    pub detection: BranchParameters,
    pub head: HeadParameters,
}

#[derive(Clone, Copy, Debug)]
pub struct DualMfaVars {
    pub gru: GruVars,
    pub region: BranchVars,
    pub detection: BranchVars,
    pub head: HeadVars,
}

impl DualMfaVars {
    /// Handles in the same order as [`DualMfaParameters::named`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = self.gru.all();
        out.extend(self.region.all());
        out.extend(self.detection.all());
        out.extend(self.head.all());
        out
    }
}

impl DualMfaParameters {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(cfg, &mut rng)
    }

    pub fn init_with(cfg: &ModelConfig, rng: &mut impl rand::Rng) -> Self {
        DualMfaParameters {
            gru: GruParameters::init(cfg, rng),
            region: BranchParameters::init(cfg, rng),
            detection: BranchParameters::init(cfg, rng),
            head: HeadParameters::init(cfg, rng),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        DualMfaParameters {
            gru: GruParameters::zeros(cfg),
            region: BranchParameters::zeros(cfg),
            detection: BranchParameters::zeros(cfg),
            head: HeadParameters::zeros(cfg),
        }
    }

    pub fn bind(&self, g: &mut Graph) -> DualMfaVars {
        DualMfaVars {
            gru: self.gru.bind(g),
            region: self.region.bind(g),
            detection: self.detection.bind(g),
            head: self.head.bind(g),
        }
    }

    /// `component.field` names with their tensors, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        fn prefixed<'a>(
            prefix: &str,
            items: Vec<(&'static str, &'a Tensor)>,
        ) -> Vec<(String, &'a Tensor)> {
            items
                .into_iter()
                .map(|(n, t)| (format!("{prefix}.{n}"), t))
                .collect()
        }
        let mut out = prefixed("gru", self.gru.named());
        out.extend(prefixed("region", self.region.named()));
        out.extend(prefixed("detection", self.detection.named()));
        out.extend(prefixed("head", self.head.named()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.gru.tensors_mut();
        out.extend(self.region.tensors_mut());
        out.extend(self.detection.tensors_mut());
        out.extend(self.head.tensors_mut());
        out
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(cfg);
        for ((name, have), (_, want)) in self.named().iter().zip(expected.named()) {
            if have.shape() != want.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config needs {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Questions and features of a mini-batch in the row layouts the graph uses.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    pub questions: Vec<TokenSequence>,
    /// `[B·HW, C_r]`.
    pub image_rows: Tensor,
    /// `[B·N_d, C_d]`.
    pub det_rows: Tensor,
}

impl FeatureBatch {
    pub fn new(instances: &[&VqaInstance], cfg: &ModelConfig) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let cells = cfg.grid_cells();
        let mut image = Vec::with_capacity(instances.len() * cells * cfg.image_channels);
        let mut det = Vec::with_capacity(instances.len() * cfg.num_boxes * cfg.det_channels);
        let mut questions = Vec::with_capacity(instances.len());
        for (i, inst) in instances.iter().enumerate() {
            inst.check_shapes(cfg).map_err(|e| Error::Format {
                record: i,
                message: e.to_string(),
            })?;
            image.extend(image_rows(&inst.image));
            det.extend(detection_rows(&inst.detections));
            questions.push(inst.question.clone());
        }
        let b = instances.len();
        Ok(FeatureBatch {
            questions,
            image_rows: Tensor::new(&[b * cells, cfg.image_channels], image)?,
            det_rows: Tensor::new(&[b * cfg.num_boxes, cfg.det_channels], det)?,
        })
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BranchOutput {
    pub fusion: Fusion,
    pub attended: Attended,
}

/// Graph handles of one forward evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    /// Question embedding `[B, k]`.
    pub question: Var,
    pub region: Option<BranchOutput>,
    pub detection: Option<BranchOutput>,
    /// Classifier input `[B, combine_dim]`.
    pub combined: Var,
    /// `[B, n_answers]`.
    pub logits: Var,
    pub batch: usize,
}

pub fn forward(
    g: &mut Graph,
    vars: &DualMfaVars,
    cfg: &ModelConfig,
    batch: &FeatureBatch,
    drop: &mut Dropout<'_>,
) -> Result<ForwardPass> {
    let question = question::encode(g, &vars.gru, &batch.questions)?;
    let inputs = BranchInputs {
        question,
        image: g.constant(batch.image_rows.clone()),
        detections: g.constant(batch.det_rows.clone()),
        batch: batch.len(),
    };

    let region = if cfg.branches.region() {
        let fusion = fuse_region(g, &inputs, &vars.region, cfg, drop)?;
        let attended = attend_region(g, &fusion, &vars.region)?;
        Some(BranchOutput { fusion, attended })
    } else {
        None
    };
    let detection = if cfg.branches.detection() {
        let fusion = fuse_detection(g, &inputs, &vars.detection, cfg, drop)?;
        let attended = attend_detection(g, &fusion, &vars.detection)?;
        Some(BranchOutput { fusion, attended })
    } else {
        None
    };

    let combined = head::combine(
        g,
        region.map(|b| b.attended.pooled),
        detection.map(|b| b.attended.pooled),
        question,
        &vars.head,
        cfg,
        drop,
    )?;
    let logits = head::logits(g, combined, &vars.head)?;
    Ok(ForwardPass {
        question,
        region,
        detection,
        combined,
        logits,
        batch: batch.len(),
    })
}

impl ForwardPass {
    /// Answer probabilities, one row per sample.
    pub fn probabilities(&self, g: &Graph) -> Vec<Vec<f64>> {
        let logits = g.value(self.logits);
        let n = logits.shape()[1];
        logits
            .data()
            .chunks(n)
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exp: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = exp.iter().sum();
                exp.into_iter().map(|e| e / total).collect()
            })
            .collect()
    }

    /// Per-sample attention maps (`[G, L]`) and attended vectors.
    pub fn attention(&self, g: &Graph) -> Vec<AttentionResult> {
        let split = |out: Option<BranchOutput>| -> Vec<(Option<Tensor>, Option<Tensor>)> {
            match out {
                None => vec![(None, None); self.batch],
                Some(b) => {
                    let w = g.value(b.attended.weights);
                    let (locs, glimpses) = (w.shape()[1], w.shape()[2]);
                    let pooled = g.value(b.attended.pooled);
                    let width = pooled.shape()[1];
                    (0..self.batch)
                        .map(|s| {
                            let block = &w.data()[s * locs * glimpses..(s + 1) * locs * glimpses];
                            let rows = Tensor::from_parts(vec![locs, glimpses], block.to_vec());
                            let v = pooled.data()[s * width..(s + 1) * width].to_vec();
                            (Some(rows.transpose2()), Some(Tensor::from_vec(v)))
                        })
                        .collect()
                }
            }
        };
        split(self.region)
            .into_iter()
            .zip(split(self.detection))
            .map(|((a1, v1), (a2, v2))| AttentionResult { a1, a2, v1, v2 })
            .collect()
    }
}

/// Mean cross-entropy over the batch and its gradient for every parameter,
/// in [`DualMfaParameters::named`] order.
pub fn loss_and_gradients(
    params: &DualMfaParameters,
    cfg: &ModelConfig,
    batch: &FeatureBatch,
    targets: &[usize],
    drop: &mut Dropout<'_>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let pass = forward(&mut g, &vars, cfg, batch, drop)?;
    let loss = head::cross_entropy(&mut g, pass.logits, targets)?;
    let grads = g.backward(loss)?;
    let value = g.value(loss).item();
    Ok((
        value,
        vars.all().into_iter().map(|v| grads.wrt(v)).collect(),
    ))
}

/// Mean cross-entropy without gradients.
pub fn loss(
    params: &DualMfaParameters,
    cfg: &ModelConfig,
    batch: &FeatureBatch,
    targets: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let pass = forward(&mut g, &vars, cfg, batch, &mut Dropout::disabled())?;
    let loss = head::cross_entropy(&mut g, pass.logits, targets)?;
    Ok(g.value(loss).item())
}

const EVAL_CHUNK: usize = 256;

/// Answer probabilities for every instance, evaluated without dropout.
pub fn predict(
    params: &DualMfaParameters,
    cfg: &ModelConfig,
    instances: &[VqaInstance],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(EVAL_CHUNK) {
        let refs: Vec<&VqaInstance> = chunk.iter().collect();
        let batch = FeatureBatch::new(&refs, cfg)?;
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let pass = forward(&mut g, &vars, cfg, &batch, &mut Dropout::disabled())?;
        out.extend(pass.probabilities(&g));
    }
    Ok(out)
}

/// Attention maps and answer probabilities for every instance.
pub fn attention_maps(
    params: &DualMfaParameters,
    cfg: &ModelConfig,
    instances: &[VqaInstance],
) -> Result<Vec<(AttentionResult, Vec<f64>)>> {
    let mut out = Vec::with_capacity(instances.len());
    for chunk in instances.chunks(EVAL_CHUNK) {
        let refs: Vec<&VqaInstance> = chunk.iter().collect();
        let batch = FeatureBatch::new(&refs, cfg)?;
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let pass = forward(&mut g, &vars, cfg, &batch, &mut Dropout::disabled())?;
        out.extend(pass.attention(&g).into_iter().zip(pass.probabilities(&g)));
    }
    Ok(out)
}

/// Outcome of a finite-difference sweep over every parameter value.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub values_checked: usize,
}

/// Compares tape gradients of the batch loss with central differences of
/// step `h` for every value of every parameter tensor.
pub fn gradient_check(
    params: &DualMfaParameters,
    cfg: &ModelConfig,
    batch: &FeatureBatch,
    targets: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_gradients(params, cfg, batch, targets, &mut Dropout::disabled())?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_parameter: String::new(),
        values_checked: 0,
    };
    for (p, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let original = probe.tensors_mut()[p].data()[i];
            probe.tensors_mut()[p].data_mut()[i] = original + h;
            let up = loss(&probe, cfg, batch, targets)?;
            probe.tensors_mut()[p].data_mut()[i] = original - h;
            let down = loss(&probe, cfg, batch, targets)?;
            probe.tensors_mut()[p].data_mut()[i] = original;
            let err = relative_error(grad.data()[i], (up - down) / (2.0 * h));
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_parameter = format!("{}[{i}]", names[p]);
            }
            report.values_checked += 1;
        }
    }
    Ok(report)
}
