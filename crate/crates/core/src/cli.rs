//! Command-line interface: `gen`, `train`, `eval`, `attend-dump`, `gradcheck`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::config::{ModelConfig, RunConfig};
use crate::data::{
    generate_planted, random_dataset, read_features, write_features, Dataset, PlantedOptions,
};
use crate::dump::{write_dump, DumpRecord};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::head::argmax_answer;
use crate::model::{attention_maps, gradient_check, DualMfaParameters, FeatureBatch};
use crate::trainer::{train, StopReason};

/// Largest relative gradient error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(
    name = "dual-mfa",
    version,
    about = "Dual co-attention VQA with multiplicative feature embedding"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a planted synthetic dataset to a directory.
    Gen {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// key=value config; desk-scale defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Validation dataset directory; the training set is used otherwise.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write `iteration,loss` lines here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Report overall and per-question-type accuracy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Restrict predictions to each sample's choice set.
        #[arg(long)]
        mc: bool,
    },
    /// Write attention maps as JSON lines and PGM images.
    AttendDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Only dump the first N samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Finite-difference check of every parameter gradient on a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        samples: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset directory written by `gen`.
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Generate N planted samples instead of reading a directory.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl DataArgs {
    fn load(&self, cfg: &ModelConfig) -> Result<Dataset> {
        match (&self.data, self.synthetic) {
            (Some(dir), _) => read_features(dir, Some(cfg)),
            (None, Some(n)) => generate_planted(n, cfg, self.data_seed, &PlantedOptions::default()),
            (None, None) => Err(Error::Config(
                "one of --data or --synthetic is required".into(),
            )),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingFile(p.to_path_buf()));
            }
            RunConfig::parse(&fs::read_to_string(p)?, RunConfig::desk())
        }
        None => Ok(RunConfig::desk()),
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; diagnostics go to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(command: Command) -> Result<i32> {
    match command {
        Command::Gen {
            n,
            seed,
            out,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let dataset = generate_planted(n, &cfg.model, seed, &PlantedOptions::default())?;
            write_features(&out, &dataset)?;
            println!("wrote {} samples to {}", dataset.len(), out.display());
            Ok(0)
        }
        Command::Train {
            config,
            data,
            val,
            out,
            iters,
            seed,
            trace,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(iters) = iters {
                cfg.train.max_iters = iters;
            }
            if let Some(seed) = seed {
                cfg.train.seed = seed;
            }
            let dataset = data.load(&cfg.model)?;
            let validation = val
                .map(|dir| read_features(&dir, Some(&cfg.model)))
                .transpose()?;
            let init = DualMfaParameters::init(&cfg.model, cfg.train.seed);
            let outcome = train(init, &cfg.model, &dataset, validation.as_ref(), &cfg.train)?;

            for (it, acc) in &outcome.trace.validations {
                println!("iteration {it:>7}  validation accuracy {acc:.4}");
            }
            checkpoint::save(&out, &outcome.params, &cfg)?;
            if let Some(path) = trace {
                let mut text = String::from("iteration,loss\n");
                for (i, l) in outcome.trace.losses.iter().enumerate() {
                    let _ = writeln!(text, "{},{l:e}", i + 1);
                }
                fs::write(path, text)?;
            }
            println!(
                "trained {} iterations, best validation accuracy {:.4}, checkpoint {}",
                outcome.iterations,
                outcome.best_accuracy,
                out.display()
            );
            match outcome.stop {
                StopReason::NumericalFailure(msg) => {
                    eprintln!("error: numerical failure, last good parameters kept: {msg}");
                    Ok(1)
                }
                StopReason::EarlyStopped => {
                    println!("stopped early");
                    Ok(0)
                }
                StopReason::MaxIterations => Ok(0),
            }
        }
        Command::Eval {
            checkpoint: path,
            data,
            mc,
        } => {
            let (params, cfg) = checkpoint::load(&path)?;
            let dataset = data.load(&cfg.model)?;
            let report = evaluate(&params, &cfg.model, &dataset, mc)?;
            print!("{report}");
            Ok(0)
        }
        Command::AttendDump {
            checkpoint: path,
            data,
            out,
            limit,
        } => {
            let (params, cfg) = checkpoint::load(&path)?;
            let mut dataset = data.load(&cfg.model)?;
            if let Some(limit) = limit {
                dataset.instances.truncate(limit);
            }
            if dataset.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let maps = attention_maps(&params, &cfg.model, &dataset.instances)?;
            let records: Vec<DumpRecord> = maps
                .iter()
                .zip(&dataset.instances)
                .enumerate()
                .map(|(i, ((att, probs), inst))| {
                    let predicted = dataset
                        .answers
                        .answer(argmax_answer(probs, None))
                        .unwrap_or("");
                    DumpRecord::new(i, inst.question_type(), predicted, att, &cfg.model)
                })
                .collect();
            write_dump(&out, &records)?;
            println!(
                "wrote {} attention records to {}",
                records.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Gradcheck {
            seed,
            samples,
            step,
        } => {
            let cfg = ModelConfig::tiny();
            let params = DualMfaParameters::init(&cfg, seed);
            let dataset = random_dataset(&cfg, samples, seed)?;
            let refs: Vec<_> = dataset.instances.iter().collect();
            let batch = FeatureBatch::new(&refs, &cfg)?;
            let report = gradient_check(&params, &cfg, &batch, &dataset.targets()?, step)?;
            println!(
                "max relative error {:.3e} over {} values (worst {})",
                report.max_rel_error, report.values_checked, report.worst_parameter
            );
            Ok(if report.max_rel_error < GRADCHECK_TOLERANCE {
                0
            } else {
                1
            })
        }
    }
}
