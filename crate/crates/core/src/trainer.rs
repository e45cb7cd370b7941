//! Training: inverted dropout, RMSProp with weight decay, global-norm
//! gradient clipping, and the mini-batch loop with validation-based early
//! stopping.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::graph::{Graph, Var};
use crate::model::{loss_and_gradients, DualMfaParameters, FeatureBatch};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    Train,
    Eval,
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; eval mode is the
/// identity.
pub fn dropout(
    g: &mut Graph,
    x: Var,
    rate: f64,
    mode: DropoutMode,
    rng: &mut impl Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
    }
    if mode == DropoutMode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = g.shape(x).to_vec();
    let numel: usize = shape.iter().product();
    let mask = (0..numel)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let mask = g.constant(Tensor::new(&shape, mask)?);
    g.hadamard(x, mask)
}

/// Dropout settings threaded through a forward pass.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn disabled() -> Self {
        Dropout {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn train(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Dropout {
            rate,
            rng: Some(rng),
        }
    }

    pub fn apply(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.rng.as_deref_mut() {
            Some(rng) => dropout(g, x, self.rate, DropoutMode::Train, rng),
            None => Ok(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    /// Decay of the running mean square.
    pub rho: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        RmsPropConfig {
            learning_rate: 3e-4,
            rho: 0.99,
            weight_decay: 1e-8,
            eps: 1e-8,
        }
    }
}

impl From<&TrainConfig> for RmsPropConfig {
    fn from(t: &TrainConfig) -> Self {
        RmsPropConfig {
            learning_rate: t.learning_rate,
            rho: t.rho,
            weight_decay: t.weight_decay,
            eps: t.rms_eps,
        }
    }
}

/// Running mean-square accumulators, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub accumulators: Vec<Vec<f64>>,
    pub step: u64,
    pub config: RmsPropConfig,
}

impl OptimizerState {
    pub fn new<'t>(params: impl IntoIterator<Item = &'t Tensor>, config: RmsPropConfig) -> Self {
        OptimizerState {
            accumulators: params.into_iter().map(|t| vec![0.0; t.len()]).collect(),
            step: 0,
            config,
        }
    }
}

/// One RMSProp update per coordinate:
///
/// ```text
/// g   = grad + weight_decay * param
/// acc = rho * acc + (1 - rho) * g²
/// param -= lr * g / (sqrt(acc) + eps)
/// ```
///
/// Nothing is modified when any gradient is non-finite.
pub fn rmsprop_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.accumulators.len() {
        return Err(Error::Config(format!(
            "rmsprop: {} parameters, {} gradients, {} accumulators",
            params.len(),
            grads.len(),
            state.accumulators.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.accumulators[i].len() != p.len() {
            return Err(Error::shape("rmsprop_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NumericalFailure(format!(
                "non-finite gradient in parameter {i} at step {}",
                state.step
            )));
        }
    }
    let RmsPropConfig {
        learning_rate,
        rho,
        weight_decay,
        eps,
    } = state.config;
    for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut state.accumulators) {
        for ((w, &dw), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.iter_mut()) {
            let d = dw + weight_decay * *w;
            *a = rho * *a + (1.0 - rho) * d * d;
            *w -= learning_rate * d / (a.sqrt() + eps);
        }
    }
    state.step += 1;
    Ok(())
}

/// Rescales all gradients together so their joint L2 norm is at most
/// `threshold`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], threshold: f64) -> f64 {
    assert!(threshold > 0.0, "clip threshold must be positive");
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > threshold {
        let scale = threshold / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    MaxIterations,
    EarlyStopped,
    /// Training aborted; the returned parameters are the best seen before.
    NumericalFailure(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    /// Mini-batch loss of every completed iteration.
    pub losses: Vec<f64>,
    /// `(iterations completed, validation accuracy)`.
    pub validations: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation accuracy.
    pub params: DualMfaParameters,
    pub best_accuracy: f64,
    pub trace: TrainTrace,
    pub iterations: usize,
    pub stop: StopReason,
}

/// Mini-batch training with reshuffling every epoch. Validation runs every
/// `val_interval` iterations and after the last one, on `validation` or on
/// the training set when none is given. Training stops early once more than
/// `patience` consecutive validations fail to improve.
pub fn train(
    init: DualMfaParameters,
    cfg: &ModelConfig,
    dataset: &Dataset,
    validation: Option<&Dataset>,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tcfg.validate()?;
    init.check_shapes(cfg)?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let validation = validation.unwrap_or(dataset);
    let targets = dataset.targets()?;

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut params = init;
    let mut state = OptimizerState::new(params.named().into_iter().map(|(_, t)| t), tcfg.into());
    let mut trace = TrainTrace::default();
    let mut best = params.clone();
    let mut best_accuracy = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut stop = StopReason::MaxIterations;

    let batch_size = tcfg.batch_size.min(dataset.len());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut iterations = 0;

    while iterations < tcfg.max_iters {
        let mut picked = Vec::with_capacity(batch_size);
        while picked.len() < batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(order[cursor]);
            cursor += 1;
        }
        let instances: Vec<_> = picked.iter().map(|&i| &dataset.instances[i]).collect();
        let batch_targets: Vec<usize> = picked.iter().map(|&i| targets[i]).collect();
        let batch = FeatureBatch::new(&instances, cfg)?;

        let step = loss_and_gradients(
            &params,
            cfg,
            &batch,
            &batch_targets,
            &mut Dropout::train(tcfg.dropout, &mut rng),
        )
        .and_then(|(loss, mut grads)| {
            if !loss.is_finite() {
                return Err(Error::NumericalFailure(format!("loss is {loss}")));
            }
            clip_gradients(&mut grads, tcfg.clip_norm);
            rmsprop_step(&mut params.tensors_mut(), &grads, &mut state)?;
            Ok(loss)
        });
        let loss = match step {
            Ok(loss) => loss,
            Err(Error::NumericalFailure(msg)) => {
                stop = StopReason::NumericalFailure(format!("iteration {iterations}: {msg}"));
                break;
            }
            Err(e) => return Err(e),
        };
        trace.losses.push(loss);
        iterations += 1;

        if iterations % tcfg.val_interval == 0 || iterations == tcfg.max_iters {
            let accuracy = evaluate(&params, cfg, validation, false)?.overall();
            trace.validations.push((iterations, accuracy));
            if accuracy > best_accuracy {
                best_accuracy = accuracy;
                best = params.clone();
                stale = 0;
            } else {
                stale += 1;
                if stale > tcfg.patience {
                    stop = StopReason::EarlyStopped;
                    break;
                }
            }
        }
    }

    if trace.validations.is_empty() {
        best_accuracy = evaluate(&best, cfg, validation, false)?.overall();
        trace.validations.push((iterations, best_accuracy));
    }

    Ok(TrainOutcome {
        params: best,
        best_accuracy,
        trace,
        iterations,
        stop,
    })
}
