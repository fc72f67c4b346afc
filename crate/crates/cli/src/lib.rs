//! Command-line driver for CSAI experiments.
//!
//! Every subcommand reads one experiment config, applies flag and
//! environment overrides, and writes JSON reports that embed the resolved
//! config. Exit codes: 0 success, 1 validation error, 2 runtime failure.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use csai_core::masking::{MaskMode, Permutation};
use csai_core::par::{set_exec, Exec};

pub use config::{DataSource, ExperimentConfig, SplitRatios};

pub const ENV_OUT_DIR: &str = "CSAI_OUT_DIR";
pub const ENV_THREADS: &str = "CSAI_THREADS";

#[derive(Debug)]
pub enum CliError {
    /// Bad input: config, flags, data or paths. Exit 1.
    Validation(String),
    /// Failure while running or writing results. Exit 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<csai_core::Error> for CliError {
    fn from(e: csai_core::Error) -> Self {
        use csai_core::Error as E;
        match e {
            E::Io(_) | E::NonFinite(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "csai", version, about = "Conditional self-attention imputation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides shared by every experiment subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment config (JSON). Without it a desk-scale synthetic experiment with seed 0 is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides CSAI_OUT_DIR and the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Artificial masking rate.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Non-uniform adjustment factor.
    #[arg(long)]
    pub factor: Option<f64>,
    /// Splits that use non-uniform masking: All, Train_only, Val_only, Test_only, Val_Test or None.
    #[arg(long, value_parser = parse_permutation)]
    pub permutation: Option<Permutation>,
    /// Uniform masking implementation: corrected or legacy.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<MaskMode>,
}

fn parse_permutation(s: &str) -> Result<Permutation, String> {
    s.parse().map_err(|e: csai_core::Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<MaskMode, String> {
    s.parse().map_err(|e: csai_core::Error| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableKind {
    History,
    Cv,
    Folds,
    Summary,
    Sweep,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the dataset (observed view and ground truth) and a manifest.
    Generate(Common),
    /// Split, fit normalization and reference gaps on the training part.
    Preprocess(Common),
    /// Write the masking plans of every split.
    Mask(Common),
    /// Train on one split, or cross-validate with --cv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cv: bool,
    },
    /// Score a saved checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Defaults to model.ckpt in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cross-validate once per value of one masking setting.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// permutation | factor | mask-mode
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. 0,5,10.
        #[arg(long)]
        values: String,
    },
    /// Realized masking rates per split, with corrected and legacy uniform plans side by side.
    Audit(Common),
    /// Render a JSON report as a table, or convert between table forms.
    Report {
        /// A report written by another subcommand, a table JSON or a table CSV.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
        /// Which table to extract from a report; defaults by report kind.
        #[arg(long, value_enum)]
        table: Option<TableKind>,
        /// Destination file; stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

impl Common {
    /// Config file (or the built-in default), then environment, then flags.
    pub fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(dir) = std::env::var_os(ENV_OUT_DIR) {
            c.out_dir = PathBuf::from(dir);
        }
        if let Some(dir) = &self.out {
            c.out_dir = dir.clone();
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        let t = &mut c.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            t.learning_rate = v;
        }
        if let Some(v) = self.folds {
            t.folds = v;
        }
        if let Some(v) = self.rate {
            t.masking.rate = v;
        }
        if let Some(v) = self.factor {
            t.masking.adjust_factor = v;
        }
        if let Some(v) = self.permutation {
            t.masking.permutation = v;
        }
        if let Some(v) = self.mode {
            t.masking.mode = v;
        }
        c.resolve()
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Some(raw) = std::env::var_os(ENV_THREADS) else {
        return Ok(());
    };
    let n: usize = raw
        .to_str()
        .and_then(|s| s.trim().parse().ok())
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("{ENV_THREADS} must be a positive integer, got {raw:?}")))?;
    if n == 1 {
        set_exec(Exec::Sequential);
    } else {
        set_exec(Exec::Parallel);
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match configure_threads().and_then(|_| commands::dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("csai: {e}");
            e.exit_code()
        }
    }
}
