use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use coalfake::pipeline::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "coalfake", version, about = "Human-LLM co-annotation with domain-aware active learning")]
pub struct Cli {
    /// Log level: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log: tracing::Level,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run rounds until a stop condition and write metrics and state.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from the state file in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// One run per point of a hyperparameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Grid axis as `key=v1,v2,...`; repeat for a cartesian product.
        #[arg(long = "grid", value_name = "KEY=VALUES", required = true)]
        grid: Vec<String>,
        /// Grid points run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score the LLM as a stand-alone detector on the test split, plain and k-NN prompts.
    EvalLlm {
        #[command(flatten)]
        common: Common,
    },
    /// Run interactively behind the review HTTP service.
    Serve {
        #[command(flatten)]
        common: Common,
    },
    /// Rebuild strategy and rho comparison tables and plots from stored runs.
    Report {
        /// Directories searched recursively for run outputs.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run config (JSON). Without it the synthetic benchmark is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value by dotted key; repeatable. `--a.b=c` is shorthand.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `runs/<run_id>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    pub fn config(&self) -> anyhow::Result<RunConfig> {
        let base = match &self.config {
            Some(path) => {
                let c = RunConfig::load(path)?;
                match self.seed {
                    Some(seed) => c.with_seed(seed),
                    None => c,
                }
            }
            None => RunConfig::synth_benchmark(self.seed.unwrap_or(0)),
        };
        Ok(base.with_overrides(&self.set).context("applying overrides")?)
    }

    pub fn out_dir(&self, config: &RunConfig) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| Path::new("runs").join(&config.run_id))
    }
}

/// Rewrites `--a.b=c` into `--set a.b=c`. Flags without a dot in the key are
/// left for clap, which rejects unknown ones.
pub fn expand_dotted_flags(args: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    for arg in args {
        match arg.strip_prefix("--").and_then(|rest| rest.split_once('=').map(|(k, _)| (k, rest))) {
            Some((key, rest)) if key.contains('.') => {
                out.push("--set".to_string());
                out.push(rest.to_string());
            }
            _ => out.push(arg),
        }
    }
    out
}
