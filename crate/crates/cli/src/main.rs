//! `fbi`: black-box classifier fingerprinting from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fbi_core::open_world::DelegateOption;
use fbi_core::walled_garden::ScoreRule;
use fbi_core::{FamilyFlavor, SelectionStrategy};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fbi_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    /// The command ran to completion but reached a failure verdict.
    #[error("{0}")]
    Verdict(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use fbi_core::Error as E;
        match self {
            CliError::Core(E::BudgetExhausted { .. } | E::OracleOutputInvalid(_)) => 3,
            CliError::Core(E::DegenerateEvidence) => 4,
            CliError::Verdict(_) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "fbi", version, about = "Black-box classifier fingerprinting")]
struct Cli {
    /// Seed for every random draw; overrides the seed of config files.
    #[arg(long, global = true, env = "FBI_SEED")]
    seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct TableArgs {
    /// Prediction table (CSV `model,input,rank,label`, or `.json`).
    #[arg(long)]
    table: PathBuf,

    /// Ground-truth CSV `input,label`.
    #[arg(long)]
    truth: Option<PathBuf>,

    /// Number of classes C (default: inferred from the labels).
    #[arg(long)]
    classes: Option<u32>,

    /// Keep only the first k ranks of every output.
    #[arg(long)]
    top_k: Option<usize>,
}

#[derive(Debug, Args)]
struct QueryArgs {
    /// Input selection strategy: all, split5050, split3070 or entropy.
    #[arg(long, default_value = "all")]
    strategy: SelectionStrategy,

    /// Number of queries L (default: every input).
    #[arg(long = "queries", short = 'L')]
    queries: Option<usize>,

    /// Anchor model for the split strategies.
    #[arg(long)]
    anchor: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic ensemble.
    Simulate {
        /// Ensemble spec (TOML).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Ground-truth output (default: next to --out with a `.truth.csv` suffix).
        #[arg(long)]
        truth: Option<PathBuf>,
    },

    /// Load and validate a prediction table, print a summary.
    IngestCheck {
        #[command(flatten)]
        table: TableArgs,
    },

    /// Pairwise D_L matrix as CSV.
    DistanceMatrix {
        #[command(flatten)]
        table: TableArgs,
        #[command(flatten)]
        query: QueryArgs,
        /// Restrict to these models (one id per line).
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Walled-garden detection: is the black-box in the family?
    #[command(alias = "detect")]
    DetectWg {
        #[command(flatten)]
        table: TableArgs,
        /// Family members, one model id per line.
        #[arg(long)]
        family: PathBuf,
        /// Black-box, `replay:MODEL`.
        #[arg(long)]
        blackbox: String,
        #[arg(long, default_value = "expectation")]
        rule: ScoreRule,
        #[arg(long)]
        max_queries: Option<usize>,
        /// Break score ties at random (seeded) instead of by input order.
        #[arg(long)]
        random_ties: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Walled-garden identification: which family is the black-box in?
    #[command(alias = "identify")]
    IdentifyWg {
        #[command(flatten)]
        table: TableArgs,
        /// Partition CSV `family,model` covering every table model.
        #[arg(long)]
        partition: PathBuf,
        #[arg(long)]
        blackbox: String,
        #[arg(long, default_value = "expectation")]
        rule: ScoreRule,
        #[arg(long)]
        max_queries: Option<usize>,
        #[arg(long)]
        random_ties: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Calibrate a detection threshold for one family at a target FPR.
    Calibrate {
        #[command(flatten)]
        table: TableArgs,
        #[command(flatten)]
        query: QueryArgs,
        /// Family members, one model id per line.
        #[arg(long)]
        family: PathBuf,
        /// Models unrelated to the family (default: every other table model).
        #[arg(long)]
        negatives: Option<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value = "close")]
        delegate: DelegateOption,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Open-world detection against a calibrated threshold.
    DetectOw {
        #[command(flatten)]
        table: TableArgs,
        /// Output of `fbi calibrate`.
        #[arg(long)]
        calibration: PathBuf,
        #[arg(long)]
        blackbox: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Open-world identification with abstention.
    IdentifyOw {
        #[command(flatten)]
        table: TableArgs,
        #[command(flatten)]
        query: QueryArgs,
        /// Known families, CSV `family,model`. Table models outside it serve
        /// as calibration negatives.
        #[arg(long)]
        partition: PathBuf,
        #[arg(long, default_value = "vanilla")]
        flavor: FamilyFlavor,
        #[arg(long)]
        blackbox: String,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value = "close")]
        delegate: DelegateOption,
        /// Input draws pooled for calibration.
        #[arg(long, default_value_t = 4)]
        calibration_draws: usize,
        /// Use this threshold instead of calibrating.
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },

    /// Run a seeded experiment protocol and write the report.
    Protocol {
        /// Protocol config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Report CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("fbi: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fbi: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
