//! Model and training configuration, with a flat `key=value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// How the projected question, grid and box features are fused.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionOp {
    /// Element-wise product of all three.
    Mul,
    /// Element-wise sum of all three.
    Add,
}

/// Normalization applied to the fused feature at every location.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    /// Unit L2 norm over the common-space channels.
    L2,
    /// Element-wise `|x|^(1/3)`.
    Power,
    None,
}

/// How the two gated branch outputs are merged before the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CombineOp {
    Add,
    Mul,
    Cat,
}

/// Which attention branches are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branches {
    Dual,
    RegionOnly,
    DetectionOnly,
}

impl Branches {
    pub fn region(self) -> bool {
        matches!(self, Branches::Dual | Branches::RegionOnly)
    }

    pub fn detection(self) -> bool {
        matches!(self, Branches::Dual | Branches::DetectionOnly)
    }
}

macro_rules! text_enum {
    ($ty:ident { $($variant:ident => $text:literal),* $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $text,)* }
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($text => Ok($ty::$variant),)*
                    other => Err(Error::Config(format!(
                        "unknown {} `{other}`", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

text_enum!(FusionOp { Mul => "mul", Add => "add" });
text_enum!(Normalization { L2 => "l2", Power => "power", None => "none" });
text_enum!(CombineOp { Add => "add", Mul => "mul", Cat => "cat" });
text_enum!(Branches { Dual => "dual", RegionOnly => "region", DetectionOnly => "detection" });

/// Dimensions and architecture switches.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub question_len: usize,
    pub embed_dim: usize,
    /// GRU hidden size `k`, which is also the question embedding size.
    pub hidden_dim: usize,
    pub image_channels: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub det_channels: usize,
    pub num_boxes: usize,
    pub common_dim: usize,
    pub glimpses: usize,
    pub n_answers: usize,
    pub fusion: FusionOp,
    pub normalization: Normalization,
    pub combine: CombineOp,
    pub branches: Branches,
    pub l2_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl ModelConfig {
    /// Full-size dimensions: ResNet-152 grid and Faster-RCNN boxes.
    pub fn paper() -> Self {
        ModelConfig {
            vocab_size: 15000,
            question_len: 26,
            embed_dim: 620,
            hidden_dim: 2400,
            image_channels: 2048,
            grid_h: 14,
            grid_w: 14,
            det_channels: 4097,
            num_boxes: 19,
            common_dim: 1200,
            glimpses: 2,
            n_answers: 2000,
            fusion: FusionOp::Mul,
            normalization: Normalization::L2,
            combine: CombineOp::Add,
            branches: Branches::Dual,
            l2_eps: 1e-12,
        }
    }

    /// Dimensions used for gradient checks and scalar oracles.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: 11,
            question_len: 4,
            embed_dim: 5,
            hidden_dim: 8,
            image_channels: 6,
            grid_h: 3,
            grid_w: 3,
            det_channels: 5,
            num_boxes: 4,
            common_dim: 7,
            glimpses: 2,
            n_answers: 6,
            ..Self::paper()
        }
    }

    /// Desk-scale dimensions matched to the planted dataset generator.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: 7,
            question_len: 4,
            embed_dim: 16,
            hidden_dim: 64,
            image_channels: 8,
            grid_h: 4,
            grid_w: 4,
            det_channels: 8,
            num_boxes: 6,
            common_dim: 32,
            glimpses: 2,
            n_answers: 4,
            ..Self::paper()
        }
    }

    pub fn grid_cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Width of one branch's attended feature (all glimpses).
    pub fn attended_dim(&self) -> usize {
        self.glimpses * self.common_dim
    }

    /// Input width of the answer classifier.
    pub fn combine_dim(&self) -> usize {
        match (self.branches, self.combine) {
            (Branches::Dual, CombineOp::Cat) => 2 * self.attended_dim(),
            _ => self.attended_dim(),
        }
    }

    // Negated comparisons so that NaN fails validation too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("question_len", self.question_len),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("image_channels", self.image_channels),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("det_channels", self.det_channels),
            ("num_boxes", self.num_boxes),
            ("common_dim", self.common_dim),
            ("glimpses", self.glimpses),
            ("n_answers", self.n_answers),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(self.l2_eps > 0.0) {
            return Err(Error::Config("l2_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Optimizer and loop settings.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iters: usize,
    pub val_interval: usize,
    pub patience: usize,
    pub dropout: f64,
    pub clip_norm: f64,
    pub learning_rate: f64,
    pub rho: f64,
    pub weight_decay: f64,
    pub rms_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 300,
            max_iters: 250_000,
            val_interval: 10_000,
            patience: 5,
            dropout: 0.5,
            clip_norm: 10.0,
            learning_rate: 3e-4,
            rho: 0.99,
            weight_decay: 1e-8,
            rms_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings sized for the planted dataset on a single CPU core.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            max_iters: 2000,
            val_interval: 200,
            patience: 5,
            dropout: 0.0,
            learning_rate: 3e-3,
            ..Self::default()
        }
    }

    // Negated comparisons so that NaN fails validation too.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.val_interval == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, val_interval and patience must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(
                "learning_rate >= 0 and rho in [0, 1) required".into(),
            ));
        }
        if !(self.weight_decay >= 0.0) || !(self.rms_eps > 0.0) {
            return Err(Error::Config(
                "weight_decay >= 0 and rms_eps > 0 required".into(),
            ));
        }
        Ok(())
    }
}

/// A model plus training configuration, serialised as `key=value` lines.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
        }
    }

    /// Every field, one `key=value` per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k}={v}");
        };
        put("vocab_size", m.vocab_size.to_string());
        put("question_len", m.question_len.to_string());
        put("embed_dim", m.embed_dim.to_string());
        put("hidden_dim", m.hidden_dim.to_string());
        put("image_channels", m.image_channels.to_string());
        put("grid_h", m.grid_h.to_string());
        put("grid_w", m.grid_w.to_string());
        put("det_channels", m.det_channels.to_string());
        put("num_boxes", m.num_boxes.to_string());
        put("common_dim", m.common_dim.to_string());
        put("glimpses", m.glimpses.to_string());
        put("n_answers", m.n_answers.to_string());
        put("fusion", m.fusion.as_str().into());
        put("normalization", m.normalization.as_str().into());
        put("combine", m.combine.as_str().into());
        put("branches", m.branches.as_str().into());
        put("l2_eps", format!("{:e}", m.l2_eps));
        put("batch_size", t.batch_size.to_string());
        put("max_iters", t.max_iters.to_string());
        put("val_interval", t.val_interval.to_string());
        put("patience", t.patience.to_string());
        put("dropout", t.dropout.to_string());
        put("clip_norm", t.clip_norm.to_string());
        put("learning_rate", format!("{:e}", t.learning_rate));
        put("rho", t.rho.to_string());
        put("weight_decay", format!("{:e}", t.weight_decay));
        put("rms_eps", format!("{:e}", t.rms_eps));
        put("seed", t.seed.to_string());
        out
    }

    /// Parses `key=value` lines on top of `base`. Blank lines and lines
    /// starting with `#` are ignored; unknown keys are an error.
    pub fn parse(text: &str, base: RunConfig) -> Result<RunConfig> {
        let mut cfg = base;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for {key}")))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "vocab_size" => m.vocab_size = num(key, value)?,
            "question_len" => m.question_len = num(key, value)?,
            "embed_dim" => m.embed_dim = num(key, value)?,
            "hidden_dim" => m.hidden_dim = num(key, value)?,
            "image_channels" => m.image_channels = num(key, value)?,
            "grid_h" => m.grid_h = num(key, value)?,
            "grid_w" => m.grid_w = num(key, value)?,
            "det_channels" => m.det_channels = num(key, value)?,
            "num_boxes" => m.num_boxes = num(key, value)?,
            "common_dim" => m.common_dim = num(key, value)?,
            "glimpses" => m.glimpses = num(key, value)?,
            "n_answers" => m.n_answers = num(key, value)?,
            "fusion" => m.fusion = value.parse()?,
            "normalization" => m.normalization = value.parse()?,
            "combine" => m.combine = value.parse()?,
            "branches" => m.branches = value.parse()?,
            "l2_eps" => m.l2_eps = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "max_iters" => t.max_iters = num(key, value)?,
            "val_interval" => t.val_interval = num(key, value)?,
            "patience" => t.patience = num(key, value)?,
            "dropout" => t.dropout = num(key, value)?,
            "clip_norm" => t.clip_norm = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "rho" => t.rho = num(key, value)?,
            "weight_decay" => t.weight_decay = num(key, value)?,
            "rms_eps" => t.rms_eps = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}
