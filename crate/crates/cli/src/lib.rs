//! Command-line front end for pixrl: training, enhancement, coverage tables,
//! metric reports and oracle inspection.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use pixrl::config::{ConfigError, RunConfig};

pub mod commands;
pub mod coverage;
pub mod report;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => EXIT_USAGE,
            Self::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Runtime(e.to_string())
            }
        })*
    };
}

runtime_from!(
    std::io::Error,
    csv::Error,
    pixrl::agent::AgentError,
    pixrl::image::ImageError,
    pixrl::nn::NnError,
    pixrl::oracle::OracleError,
    pixrl::metrics::MetricError,
    pixrl::reward::RewardError
);

#[derive(Debug, Parser)]
#[command(name = "pixrl", version, about = "Pixel-wise curve agent for low-light enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy on a dataset of dark images.
    Train(CommonArgs),
    /// Enhance images greedily with a trained checkpoint.
    Enhance(CommonArgs),
    /// Print the coverage range table for both action spaces.
    Coverage(coverage::CoverageArgs),
    /// Summarize enhanced outputs against references.
    Report(report::ReportArgs),
    /// Show the oracle's rating distribution for one image.
    Score(commands::ScoreArgs),
    /// Write a synthetic dark/bright dataset.
    Synth(commands::SynthArgs),
}

/// Flags shared by the commands that read a run configuration.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Key-value config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Training steps for `train`, greedy steps otherwise.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_parser = ["ours", "baseline"])]
    pub action_space: Option<String>,
    /// Drop the aesthetic reward term (w1 = 0).
    #[arg(long)]
    pub no_aes_reward: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Any config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Which key `--steps` sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepsKey {
    Train,
    Enhance,
}

impl CommonArgs {
    /// Merges the config file, `--set` pairs and explicit flags, in that
    /// order, and validates the result.
    pub fn resolve(&self, steps: StepsKey) -> Result<RunConfig, CliError> {
        let mut b = RunConfig::builder();
        if let Some(path) = &self.config {
            b = b.file(path)?;
        }
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{item}`")))?;
            b = b.set(k.trim(), v.trim());
        }
        let path = |p: &PathBuf| p.display().to_string();
        if let Some(p) = &self.dataset {
            b = b.set("dataset", path(p));
        }
        if let Some(p) = &self.checkpoint {
            b = b.set("checkpoint", path(p));
        }
        if let Some(p) = &self.out {
            b = b.set("out", path(p));
        }
        if let Some(n) = self.steps {
            let key = match steps {
                StepsKey::Train => "steps",
                StepsKey::Enhance => "enhance_steps",
            };
            b = b.set(key, n.to_string());
        }
        if let Some(s) = self.seed {
            b = b.set("seed", s.to_string());
        }
        if let Some(w) = self.workers {
            b = b.set("workers", w.to_string());
        }
        if let Some(e) = self.epochs {
            b = b.set("epochs", e.to_string());
        }
        if let Some(a) = &self.action_space {
            b = b.set("action_space", a.clone());
        }
        if self.no_aes_reward {
            b = b.set("w1", "0");
        }
        Ok(b.build()?)
    }
}

/// Parses `args` (program name first) and runs the command, writing normal
/// output to `out` and diagnostics to `err`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(&cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(command: &Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Train(a) => commands::train(a, out),
        Command::Enhance(a) => commands::enhance(a, out),
        Command::Coverage(a) => coverage::run(a, out),
        Command::Report(a) => report::run(a, out),
        Command::Score(a) => commands::score(a, out),
        Command::Synth(a) => commands::synth(a, out),
    }
}
