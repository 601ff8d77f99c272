//! Flag and config-file merging, plus the run manifest.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qhevqa::vqa::Mode;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser, Debug)]
#[command(name = "qhevqa", version, about = "Delegated variational classifier over a simulated quantum homomorphic scheme")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Single-T-gate statistics with and without a gadget.
    GadgetDemo,
    /// Synthesizes a rotation into H, T and T†.
    Decompose {
        #[arg(long, value_enum, default_value_t = Axis::X)]
        axis: Axis,
        #[arg(long, default_value_t = 5.57, allow_negative_numbers = true)]
        angle: f64,
    },
    /// Trains the shadow classifier and writes metrics, plot and model.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Connect to a running server instead of spawning one.
        #[arg(long)]
        connect: bool,
    },
    /// Runs the invariant suite and prints a per-property table.
    Verify {
        /// Replace a frame rule with a wrong one (negative control).
        #[arg(long, hide = true, value_enum)]
        mutate: Option<Mutation>,
    },
    /// Serves delegated sessions over TCP.
    Serve {
        /// Stop after this many sessions.
        #[arg(long)]
        sessions: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    X,
    Y,
    Z,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mutation {
    Cnot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Inproc,
    Tcp,
}

#[derive(Args, Debug, Default, Clone)]
pub struct CommonArgs {
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub shots: Option<usize>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub kappa: Option<usize>,
    /// plaintext, delegated-exact-gates or delegated-faithful
    #[arg(long, global = true)]
    pub mode: Option<Mode>,
    #[arg(long, global = true, value_enum)]
    pub transport: Option<TransportKind>,
    #[arg(long, global = true)]
    pub port: Option<u16>,
    /// CSV with 64 pixel columns then a 0/1 label; the bundled set if absent.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

/// Values read from a `key = value` file. Unknown keys are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub shots: Option<usize>,
    pub epsilon: Option<f64>,
    pub kappa: Option<usize>,
    pub mode: Option<String>,
    pub transport: Option<TransportKind>,
    pub port: Option<u16>,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub test_fraction: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        FileConfig::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<FileConfig> {
        Ok(toml::from_str(text)?)
    }
}

/// Fully resolved settings: flag, then config file, then default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub seed: u64,
    pub shots: usize,
    pub epsilon: f64,
    pub kappa: usize,
    pub mode: Mode,
    pub transport: TransportKind,
    pub port: u16,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub test_fraction: Option<f64>,
}

impl Settings {
    pub fn resolve(args: &CommonArgs, file: FileConfig) -> Result<Settings> {
        let mode = match (&args.mode, &file.mode) {
            (Some(m), _) => *m,
            (None, Some(s)) => s.parse().map_err(|e| anyhow::anyhow!("{e}"))?,
            (None, None) => Mode::Plaintext,
        };
        let port = args
            .port
            .or(file.port)
            .or_else(|| std::env::var("QHEVQA_PORT").ok().and_then(|p| p.parse().ok()))
            .unwrap_or(qhevqa::protocol::DEFAULT_PORT);
        let s = Settings {
            seed: args.seed.or(file.seed).unwrap_or(0),
            shots: args.shots.or(file.shots).unwrap_or(0),
            epsilon: args.epsilon.or(file.epsilon).unwrap_or(qhevqa::skdecomp::DEFAULT_EPSILON),
            kappa: args.kappa.or(file.kappa).unwrap_or(32),
            mode,
            transport: args.transport.or(file.transport).unwrap_or(TransportKind::Inproc),
            port,
            dataset: args.dataset.clone().or(file.dataset),
            out: args.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("out")),
            epochs: file.epochs,
            learning_rate: file.learning_rate,
            batch_size: file.batch_size,
            test_fraction: file.test_fraction,
        };
        if !(s.epsilon > 0.0 && s.epsilon < 1.0) {
            bail!("epsilon must lie in (0, 1)");
        }
        Ok(s)
    }
}

/// Written next to every artifact so a run can be replayed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub seed: u64,
    pub mode: Mode,
    pub epsilon: f64,
    pub kappa: usize,
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub shots: usize,
    pub transport: TransportKind,
    pub epochs: usize,
    pub learning_rate: f64,
}
