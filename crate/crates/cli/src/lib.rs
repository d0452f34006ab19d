//! Command-line front end for `factorial-flow`: synthetic data generation,
//! training, encoding, manipulation, evaluation and the one-shot benchmark.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::{BenchSummary, Context};
pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "fdnf", version, about = "Factorial discriminative normalizing flows")]
pub struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub overwrite: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw train/test datasets from a random factor-analysis model.
    GenData,
    /// Train one flow (regime and factor from the config or flags).
    Train {
        #[arg(long)]
        regime: Option<String>,
        /// Conditioning factor of a discriminative prior.
        #[arg(long)]
        factor: Option<String>,
        /// Continue from the model's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Export latent codes and a 2-D projection.
    Encode {
        /// Model directory name (`nf`, `dnf-<factor>`, `fdnf`).
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Project only this factor's partial code (factorial models only).
        #[arg(long)]
        factor: Option<String>,
    },
    /// Move the samples of one class to another and write them as a dataset.
    Manipulate {
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        factor: String,
        #[arg(long)]
        from: usize,
        #[arg(long)]
        to: usize,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Manipulation report for one trained model.
    Eval {
        #[arg(long)]
        model: Option<String>,
    },
    /// gen-data, then train NF, DNF and factorial DNF, then evaluate them all.
    Bench,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Parses the config file, applies flag overrides and validates the result.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out = out.clone();
    }
    if let Command::Train { regime, factor, .. } = &cli.command {
        if let Some(r) = regime {
            config.model.regime = r.clone();
        }
        if factor.is_some() {
            config.model.factor = factor.clone();
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn run(cli: &Cli) -> Result<String, CliError> {
    let config = resolve_config(cli)?;
    if cli.threads == Some(0) {
        return Err(CliError::Validation("--threads must be positive".into()));
    }
    let ctx = Context::new(config, cli.overwrite);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    pool.install(|| match &cli.command {
        Command::GenData => commands::gen_data(&ctx).map(|p| format!("wrote {}", p.display())),
        Command::Train { resume, .. } => commands::train(&ctx, *resume).map(|p| format!("wrote {}", p.display())),
        Command::Encode { model, split, factor } => {
            commands::encode(&ctx, model.as_deref(), *split, factor.as_deref()).map(|p| format!("wrote {}", p.display()))
        }
        Command::Manipulate {
            model,
            factor,
            from,
            to,
            split,
        } => commands::manipulate(&ctx, model.as_deref(), factor, *from, *to, *split)
            .map(|p| format!("wrote {}", p.display())),
        Command::Eval { model } => commands::eval(&ctx, model.as_deref()).map(|p| format!("wrote {}", p.display())),
        Command::Bench => commands::bench(&ctx).map(|s| s.markdown),
    })
}
