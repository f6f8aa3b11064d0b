use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use dex_core::analysis::GradcheckOptions;
use dex_core::backbone::Model;
use dex_core::{Precision, Real};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::report::{flops_report, histogram_report, probe_report, write_histogram_csv, write_json};
use crate::run::{pretrain, run_gradcheck, CHECKPOINT_FILE, GRADCHECK_FILE, METRICS_FILE};
use crate::samples::write_samples;

pub const THREADS_VAR: &str = "DEX_THREADS";

#[derive(Parser, Debug)]
#[command(name = "dex", version, about = "Director-experts masked pretraining on synthetic multi-modality images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Override one configuration value, e.g. `--set train.seed=7`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Pretrain; writes metrics.jsonl, checkpoint.dex and config.json to the output directory.
    Pretrain(ConfigArgs),
    /// Compare analytic and finite-difference gradients of a fresh 64-bit model.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Parameter coordinates to check.
        #[arg(long, default_value_t = 240)]
        coordinates: usize,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        /// Let gradients flow into the director (fault injection).
        #[arg(long, hide = true)]
        leak_director: bool,
    },
    /// Routing histograms, cost table or linear probes of a model.
    Analyze {
        /// Checkpoint to analyze.
        #[arg(long, value_name = "PATH", required_unless_present = "config", conflicts_with = "config")]
        checkpoint: Option<PathBuf>,
        /// Analyze the untrained model of this configuration instead.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE", requires = "config")]
        overrides: Vec<String>,
        #[arg(long, value_enum)]
        what: What,
        /// Report directory; defaults to the configured output directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Samples for histograms and probes.
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        /// Ridge penalty of the probes.
        #[arg(long, default_value_t = 1e-2)]
        l2: f64,
    },
    /// Write generated images (PGM) and labels.csv.
    GenSamples {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(short = 'n', long, default_value_t = 16)]
        count: usize,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum What {
    Histograms,
    Flops,
    Probe,
}

enum Outcome {
    Ok,
    CheckFailed,
}

/// Parses arguments and runs; the returned code follows 0 ok, 1 check
/// failed, 2 usage or configuration error, 3 numeric abort.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let defaults = format!(
        "Configuration keys and their defaults:\n{}",
        RunConfig::default().to_json_pretty()
    );
    let mut command = Cli::command();
    for name in ["pretrain", "gradcheck", "analyze", "gen-samples"] {
        command = command.mut_subcommand(name, |c| c.after_long_help(defaults.clone()));
    }
    let matches = command.get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    if let Err(e) = check_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match execute(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

/// Kernels run on one thread; the variable is validated as an upper bound.
fn check_threads() -> Result<usize> {
    match std::env::var(THREADS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_VAR}={v:?} must be a positive integer"))),
        },
    }
}

fn execute(command: Command) -> Result<Outcome> {
    match command {
        Command::Pretrain(args) => {
            let config = args.load()?;
            let steps = match config.train.precision {
                Precision::F64 => pretrain::<f64>(&config, |_| {})?.step,
                Precision::F32 => pretrain::<f32>(&config, |_| {})?.step,
            };
            let dir = config.output_dir.display();
            println!("trained {steps} steps; wrote {dir}/{METRICS_FILE} and {dir}/{CHECKPOINT_FILE}");
            Ok(Outcome::Ok)
        }
        Command::Gradcheck {
            config,
            coordinates,
            step,
            leak_director,
        } => {
            let config = config.load()?;
            let opts = GradcheckOptions {
                coordinates,
                step,
                lambda_co: config.train.lambda_co,
                lambda_bal: config.train.lambda_bal_init,
                seed: config.train.seed,
                ..GradcheckOptions::default()
            };
            let report = run_gradcheck(&config, &opts, leak_director)?;
            std::fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
            write_json(&config.output_dir.join(GRADCHECK_FILE), &report)?;
            println!("gradcheck {}: {}", if report.passed { "passed" } else { "FAILED" }, report.summary());
            Ok(if report.passed { Outcome::Ok } else { Outcome::CheckFailed })
        }
        Command::Analyze {
            checkpoint,
            config,
            overrides,
            what,
            out,
            samples,
            l2,
        } => {
            let source = match (checkpoint, config) {
                (Some(path), _) => Source::Checkpoint(Checkpoint::read(&path)?),
                (None, Some(path)) => Source::Fresh(RunConfig::load(&path, &overrides)?),
                (None, None) => return Err(Error::Config("--checkpoint or --config is required".into())),
            };
            let run_config = source.config().clone();
            let dir = out.unwrap_or_else(|| run_config.output_dir.clone());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let job = Analysis {
                what,
                dir,
                samples,
                l2,
            };
            match run_config.train.precision {
                Precision::F64 => job.run(&source.model::<f64>()?, &run_config)?,
                Precision::F32 => job.run(&source.model::<f32>()?, &run_config)?,
            }
            Ok(Outcome::Ok)
        }
        Command::GenSamples { config, out, count } => {
            let config = config.load()?;
            let paths = write_samples(&out, &config.data, count)?;
            println!("wrote {} samples and labels.csv to {}", paths.len(), out.display());
            Ok(Outcome::Ok)
        }
    }
}

enum Source {
    Checkpoint(Checkpoint),
    Fresh(RunConfig),
}

impl Source {
    fn config(&self) -> &RunConfig {
        match self {
            Source::Checkpoint(c) => c.config(),
            Source::Fresh(c) => c,
        }
    }

    fn model<T: Real>(&self) -> Result<Model<T>> {
        match self {
            Source::Checkpoint(c) => Ok(c.restore::<T>()?.model),
            Source::Fresh(c) => Ok(Model::new(c.network.clone(), c.train.seed)?),
        }
    }
}

struct Analysis {
    what: What,
    dir: PathBuf,
    samples: usize,
    l2: f64,
}

impl Analysis {
    fn run<T: Real>(&self, model: &Model<T>, config: &RunConfig) -> Result<()> {
        match self.what {
            What::Histograms => {
                let report = histogram_report(model, &config.data, self.samples)?;
                write_json(&self.dir.join("histograms.json"), &report)?;
                write_histogram_csv(&self.dir.join("histograms.csv"), &report)?;
                for layer in &report.layers {
                    match layer.mean_pairwise_jsd {
                        Some(j) => println!("layer {}: mean pairwise JSD {j:.4} bits", layer.layer),
                        None => println!("layer {}: fewer than two modalities sampled", layer.layer),
                    }
                }
            }
            What::Flops => {
                let report = flops_report(&config.network, config.train.batch_size);
                write_json(&self.dir.join("flops.json"), &report)?;
                for r in &report.projection_ratio {
                    println!("N = {}: token-wise / image-wise gate projection = {}", r.tokens, r.ratio);
                }
            }
            What::Probe => {
                let report = probe_report(model, &config.data, self.samples, self.l2)?;
                write_json(&self.dir.join("probe.json"), &report)?;
                println!(
                    "semantic probe {:.4} (chance {:.2}), modality probe {:.4}",
                    report.semantic.accuracy, report.semantic_chance, report.modality.accuracy
                );
            }
        }
        Ok(())
    }
}
