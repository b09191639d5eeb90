mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Parser, Subcommand};

use config::{ExperimentConfig, ModelChoice, Overrides};
use error::{categorize, ConfigError};

/// Relevance propagation experiments on toy attention models.
#[derive(Debug, Parser)]
#[command(name = "lrp-lab", version)]
struct Cli {
    /// JSON experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Root directory for run outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Examples per evaluation suite.
    #[arg(long, global = true)]
    eval_n: Option<usize>,
    /// LRP stabilizer.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    ig_steps: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Downsample MNIST and generate the keyword task into the dataset cache.
    PrepareData,
    /// Train a model and write its checkpoint.
    Train {
        #[arg(long, value_enum)]
        model: Option<ModelChoice>,
    },
    /// Scalar product chain under both groupings.
    Counterexample {
        /// Three comma-separated inputs.
        #[arg(long, value_delimiter = ',', default_values_t = [2.0, 3.0, 4.0])]
        x: Vec<f64>,
        /// Stabilizer for this check only.
        #[arg(long, default_value_t = 1e-12)]
        chain_epsilon: f64,
    },
    /// Invariance of LOO, IG and AttnLRP across the MNIST pair.
    Rq1,
    /// Faithfulness table for all methods on the keyword encoder.
    Rq2,
    /// Layer-wise hybrid rule ablations on the keyword encoder.
    Rq3,
    /// One attribution for one test example.
    Explain {
        /// Registry name, e.g. `loo`, `ig`, `cplrp`, `front_to_back:3`.
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum)]
        model: Option<ModelChoice>,
    },
    /// Faithfulness metrics for the configured methods.
    Eval {
        #[arg(long, value_enum)]
        model: Option<ModelChoice>,
        /// Comma-separated registry names; overrides `methods` in the config.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out,
        eval_n: cli.eval_n,
        epsilon: cli.epsilon,
        ig_steps: cli.ig_steps,
    };
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides).map_err(|e| anyhow!(ConfigError(format!("{e:#}"))))?;
    match cli.command {
        Command::PrepareData => commands::prepare_data(&cfg)?,
        Command::Train { model } => {
            if let Some(m) = model {
                cfg.model = m;
            }
            commands::train_cmd(&cfg)?
        }
        Command::Counterexample { x, chain_epsilon } => {
            if x.len() != 3 {
                return Err(anyhow!(ConfigError(format!("--x needs three values, got {}", x.len()))));
            }
            return commands::counterexample(&cfg, [x[0], x[1], x[2]], chain_epsilon);
        }
        Command::Rq1 => commands::rq1(&cfg)?,
        Command::Rq2 => commands::rq2(&cfg)?,
        Command::Rq3 => commands::rq3(&cfg)?,
        Command::Explain { method, index, model } => {
            if let Some(m) = model {
                cfg.model = m;
            }
            commands::explain_cmd(&cfg, &method, index)?
        }
        Command::Eval { model, methods } => {
            if let Some(m) = model {
                cfg.model = m;
            }
            if let Some(m) = methods {
                cfg.methods = m;
            }
            commands::eval_cmd(&cfg)?
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        // A counterexample check that does not match its expected values.
        Ok(false) => ExitCode::from(7),
        Err(e) => {
            let cat = categorize(&e);
            eprintln!("{}: {e:#}", cat.label());
            ExitCode::from(cat as u8)
        }
    }
}
