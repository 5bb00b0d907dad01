mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use structdyn::config::{Method, SystemName};
use structdyn::pipeline::{Prediction, RolloutMode};
use structdyn::Error;

use commands::Metric;
use run_config::RunConfig;

#[derive(Parser)]
#[command(name = "structdyn", version, about = "Learn structured GP dynamics models and evaluate their rollouts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default run configuration for a system.
    Config {
        #[arg(long)]
        system: String,
        #[arg(long, default_value = "sgpd")]
        method: String,
        /// Train an unstructured model with this Butcher tableau instead.
        #[arg(long)]
        tableau: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate ground truth and noisy observations.
    Generate {
        #[command(flatten)]
        source: ConfigSource,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Observe without noise.
        #[arg(long)]
        zero_noise: bool,
    },
    /// Train a model, writing checkpoints, history and the selected-model pointer.
    Train {
        #[command(flatten)]
        source: ConfigSource,
        /// Run directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Roll out an ensemble of model draws.
    Rollout {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint to use instead of the selected one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, conflicts_with = "adaptive")]
        step_size: Option<f64>,
        #[arg(long)]
        adaptive: bool,
        #[arg(long, default_value_t = 1e-6, requires = "adaptive")]
        rtol: f64,
        #[arg(long, default_value_t = 1e-8, requires = "adaptive")]
        atol: f64,
    },
    /// Compute metrics of an ensemble against a ground-truth trajectory.
    Eval {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Comma-separated subset of l2, energy, det, drift, std.
        #[arg(long, default_value = "l2,energy,std", value_delimiter = ',')]
        metrics: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ConfigSource {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the default configuration of this system.
    #[arg(long)]
    system: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> structdyn::Result<RunConfig> {
        match (&self.config, &self.system) {
            (Some(path), _) => RunConfig::load(path),
            (None, Some(name)) => Ok(RunConfig::default_for(name.parse()?, Method::Sgpd, None)),
            (None, None) => Err(Error::InvalidArgument("either --config or --system is required".into())),
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_)
        | Error::DimensionMismatch { .. }
        | Error::UnknownSystem(_)
        | Error::Parse(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_)
        | Error::NoEligibleCheckpoint => 2,
        _ => 3,
    }
}

fn run(cli: Cli) -> structdyn::Result<()> {
    match cli.command {
        Command::Config {
            system,
            method,
            tableau,
            out,
        } => {
            let system: SystemName = system.parse()?;
            let method: Method = method.parse()?;
            if let Some(t) = &tableau {
                structdyn::integrators::ButcherTableau::by_name(t)?;
            }
            RunConfig::default_for(system, method, tableau.as_deref()).save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Generate {
            source,
            out,
            seed,
            zero_noise,
        } => {
            let mut cfg = source.load()?;
            if zero_noise {
                cfg.experiment.noise_variances.iter_mut().for_each(|v| *v = 0.0);
            }
            let seed = seed.unwrap_or(cfg.experiment.train.seed);
            let m = commands::generate(&cfg, &out, seed)?;
            println!(
                "wrote {} training rows and {} reference rows to {}",
                m.train_rows,
                m.reference_rows,
                out.display()
            );
        }
        Command::Train {
            source,
            out,
            seed,
            epochs,
            resume,
        } => {
            let mut cfg = source.load()?;
            if let Some(s) = seed {
                cfg.experiment.train.seed = s;
            }
            if let Some(e) = epochs {
                cfg.experiment.train.epochs = e;
            }
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| Error::InvalidArgument("no output directory: pass --out or set output_dir".into()))?;
            cfg.output_dir = Some(dir.clone());
            let summary = commands::train_run(&cfg, &dir, resume)?;
            match summary.selected.epoch {
                Some(e) => println!("trained {} epochs; selected epoch {e}", summary.epochs_run),
                None => println!("trained {} epochs; no checkpoints, final model selected", summary.epochs_run),
            }
        }
        Command::Rollout {
            run,
            checkpoint,
            out,
            steps,
            samples,
            seed,
            step_size,
            adaptive,
            rtol,
            atol,
        } => {
            let cfg = RunConfig::load(&run.join(commands::RUN_FILE))?;
            let checkpoint = match checkpoint {
                Some(p) => p,
                None => commands::selected_checkpoint(&run)?.0,
            };
            let mode = if adaptive {
                RolloutMode::Adaptive { rtol, atol }
            } else if step_size.is_some() {
                RolloutMode::Fixed { step_size }
            } else {
                cfg.prediction.mode
            };
            let prediction = Prediction {
                dt: cfg.experiment.dt,
                n_steps: match steps {
                    Some(n) => n,
                    None => cfg.prediction_steps()?,
                },
                samples: samples.unwrap_or(cfg.prediction.samples),
                features: cfg.experiment.train.feature_count,
                seed: seed.unwrap_or(cfg.prediction.seed),
                mode,
            };
            let m = commands::rollout(&cfg, &checkpoint, prediction, &out)?;
            println!("wrote {} rollouts to {}", m.files.len(), out.display());
        }
        Command::Eval {
            ensemble,
            truth,
            metrics,
            out,
        } => {
            let metrics = metrics
                .iter()
                .map(|m| m.trim().parse::<Metric>())
                .collect::<structdyn::Result<Vec<_>>>()?;
            let report = commands::evaluate(&ensemble, &truth, &metrics, &out)?;
            for (k, v) in &report.scalars {
                println!("{k} = {v}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
