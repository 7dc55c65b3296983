mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};

use crate::config::{Defense, RunConfig};
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "shadow-defense", version, about = "Train, attack and evaluate shadow-defended sign classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every config-driven subcommand.
#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Where outputs are written (overrides `output_dir` in the config).
    #[arg(long, env = "SHADOW_DEFENSE_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,

    /// Profile channel used by the model.
    #[arg(long, value_enum)]
    defense: Option<Defense>,
}

impl Common {
    fn resolve(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if let Some(d) = self.defense {
            cfg.defense = d;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the (optionally quadruplicated) training set, train, and write
    /// `model.ckpt` plus `train_log.json`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Add a shadowed copy of every image.
        #[arg(long, action = ArgAction::Set)]
        adv: Option<bool>,
        /// Add randomly transformed copies.
        #[arg(long, action = ArgAction::Set)]
        transform: Option<bool>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Seed for weight initialization and shuffling.
        #[arg(long)]
        train_seed: Option<u64>,
    },
    /// Run the shadow-attack sweep against a checkpoint and write CSV, JSON
    /// and SVG reports.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to attack; `<output_dir>/model.ckpt` by default.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Shadow strengths, comma separated.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<f64>>,
        /// Attack trials per k
        #[arg(long)]
        trials: Option<usize>,
        /// Base seed of the first trial
        #[arg(long)]
        pso_seed: Option<u64>,
    },
    /// Check the shadow perturbation bound on random image, polygon and
    /// strength triples.
    Boundcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write benign and shadowed saliency maps of one sample side by side.
    Saliency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sample id as listed in the dataset.
        #[arg(long)]
        sample_id: String,
        /// Output PNG; `<output_dir>/saliency_<id>.png` by default.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Strength of the shadow searched for the right-hand map.
        #[arg(long, default_value_t = 0.43)]
        k: f64,
    },
    /// Render the configured synthetic dataset to PNGs and a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Widen a three-channel checkpoint to four input channels.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train {
            common,
            adv,
            transform,
            epochs,
            learning_rate,
            train_seed,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(v) = adv {
                cfg.augment.adv = v;
            }
            if let Some(v) = transform {
                cfg.augment.transform = v;
            }
            if let Some(v) = epochs {
                cfg.train.epochs = v;
            }
            if let Some(v) = learning_rate {
                cfg.train.learning_rate = v;
            }
            if let Some(v) = train_seed {
                cfg.train.seed = v;
            }
            commands::train(&cfg)
        }
        Command::Attack {
            common,
            checkpoint,
            k,
            trials,
            pso_seed,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(k) = k {
                cfg.eval.k_values.values = k;
            }
            if let Some(t) = trials {
                cfg.eval.trials = t;
            }
            if let Some(s) = pso_seed {
                cfg.pso.seed = s;
            }
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output_dir.join(commands::CHECKPOINT_FILE));
            commands::attack(&cfg, &ckpt)
        }
        Command::Boundcheck { common, samples, seed } => {
            let mut cfg = common.resolve()?;
            if let Some(n) = samples {
                cfg.boundcheck.samples = n;
            }
            if let Some(s) = seed {
                cfg.boundcheck.seed = s;
            }
            commands::boundcheck(&cfg)
        }
        Command::Saliency {
            common,
            checkpoint,
            sample_id,
            output,
            k,
        } => {
            let cfg = common.resolve()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.output_dir.join(commands::CHECKPOINT_FILE));
            let output = output.unwrap_or_else(|| cfg.output_dir.join(format!("saliency_{sample_id}.png")));
            commands::saliency(&cfg, &ckpt, &sample_id, &output, k)
        }
        Command::GenData { common } => commands::gen_data(&common.resolve()?),
        Command::Adapt { checkpoint, output } => commands::adapt(&checkpoint, &output),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
