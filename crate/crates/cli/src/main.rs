use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coen::checkpoint::Checkpoint;
use coen::config::RunConfig;
use coen::data::{generate, write_dataset};
use coen::eval::InferenceMode;
use coen::run::{self, EvalFeatures};
use coen::train::load_model;
use coen::verify::{self, ModelCheckOptions};
use coen::Error;

/// Multi-spectral re-identification with collaborative enhancement.
#[derive(Parser)]
#[command(name = "coen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set model.embed_dim=32`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run name; the run directory is `$COEN_RUN_ROOT/<name>`.
    #[arg(long)]
    name: Option<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, Error> {
        let base = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let mut overrides = self.overrides.clone();
        if let Some(n) = &self.name {
            overrides.push(format!("name={n:?}"));
        }
        let cfg = base.with_overrides(&overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset on disk from `data.synth`.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (defaults to `data.root`).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write logs and checkpoints to the run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Resume from this checkpoint.
        #[arg(long, conflicts_with = "resume_latest")]
        resume: Option<PathBuf>,
        /// Resume from the newest checkpoint in the run directory.
        #[arg(long)]
        resume_latest: bool,
        /// Print every n-th step's losses (0 = silent).
        #[arg(long, default_value_t = 10)]
        print_every: u64,
    },
    /// Evaluate a checkpoint; writes metrics.txt and distances.txt.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint (defaults to the newest in the run directory).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory (defaults to the run directory).
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Print the top gallery matches of every query.
    Rank {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Inference feature, e.g. `RGB-NIR-TIR-Proxy`.
        #[arg(long, default_value = "RGB-NIR-TIR-Proxy")]
        mode: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Finite-difference checks of every operation and the full network.
    Gradcheck {
        /// Configuration to check; defaults to the built-in micro model.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Check at most this many entries per parameter tensor.
        #[arg(long)]
        max_entries: Option<usize>,
        #[arg(long, default_value_t = verify::OP_TOL)]
        op_tol: f64,
        #[arg(long, default_value_t = verify::MODEL_TOL)]
        model_tol: f64,
    },
}

fn checkpoint_for(cfg: &RunConfig, explicit: Option<PathBuf>) -> Result<PathBuf, Error> {
    match explicit {
        Some(p) => Ok(p),
        None => run::latest_checkpoint(&run::run_dir(cfg)),
    }
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { cfg, out } => {
            let cfg = cfg.load()?;
            let out = out
                .or_else(|| cfg.data.root.clone())
                .ok_or_else(|| Error::Usage("synth needs --out or data.root".into()))?;
            let ds = generate(&cfg.data.synth)?;
            write_dataset(&out, &ds)?;
            println!(
                "wrote {} train, {} query, {} gallery samples to {}",
                ds.train.len(),
                ds.query.len(),
                ds.gallery.len(),
                out.display()
            );
        }
        Command::Train {
            cfg,
            resume,
            resume_latest,
            print_every,
        } => {
            let cfg = cfg.load()?;
            let data = run::load_data(&cfg)?;
            let dir = run::run_dir(&cfg);
            let resume = if resume_latest {
                Some(run::latest_checkpoint(&dir)?)
            } else {
                resume
            };
            let outcome = run::train_run(&cfg, &data, &dir, resume.as_deref(), |r| {
                if print_every > 0 && r.step % print_every == 0 {
                    println!("{}", r.log_line());
                }
            })?;
            println!("trained {} steps; checkpoint {}", outcome.steps, outcome.checkpoint.display());
        }
        Command::Eval { cfg, checkpoint, out } => {
            let cfg = cfg.load()?;
            let path = checkpoint_for(&cfg, checkpoint)?;
            let (model, store) = load_model(&cfg, &Checkpoint::load(&path)?)?;
            let data = run::load_data(&cfg)?;
            let report = run::evaluate(&cfg, &model, &store, &data)?;
            let out = out.unwrap_or_else(|| run::run_dir(&cfg));
            run::write_eval(&cfg, &report, &out)?;
            print!("{}", report.metrics_text(&cfg));
        }
        Command::Rank {
            cfg,
            checkpoint,
            mode,
            top,
        } => {
            let cfg = cfg.load()?;
            let mode: InferenceMode = mode.parse()?;
            let path = checkpoint_for(&cfg, checkpoint)?;
            let (model, store) = load_model(&cfg, &Checkpoint::load(&path)?)?;
            let data = run::load_data(&cfg)?;
            let feats = EvalFeatures::extract(&cfg, &model, &store, &data)?;
            print!("{}", run::rank_text(&cfg, &feats, mode, top)?);
        }
        Command::Gradcheck {
            config,
            overrides,
            max_entries,
            op_tol,
            model_tol,
        } => {
            let base = match config {
                Some(p) => RunConfig::from_file(&p)?,
                None => verify::micro_config(),
            };
            let cfg = base.with_overrides(&overrides)?;
            cfg.validate()?;
            let ops = verify::op_suite()?;
            print!("{ops}");
            let opts = ModelCheckOptions {
                max_entries,
                ..Default::default()
            };
            let model = verify::model_gradcheck(&cfg, &opts)?;
            print!("{model}");
            let ops_ok = ops.passes(op_tol);
            let model_ok = model.passes(model_tol);
            println!(
                "ops: max_rel_err={:.3e} tol={op_tol:.0e} {}",
                ops.max_rel_err(),
                if ops_ok { "PASS" } else { "FAIL" }
            );
            println!(
                "model: max_rel_err={:.3e} tol={model_tol:.0e} {}",
                model.max_rel_err(),
                if model_ok { "PASS" } else { "FAIL" }
            );
            if !(ops_ok && model_ok) {
                return Err(Error::GradCheck(format!(
                    "ops {:.3e} (tol {op_tol:.0e}), model {:.3e} (tol {model_tol:.0e})",
                    ops.max_rel_err(),
                    model.max_rel_err()
                ))
                .into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
