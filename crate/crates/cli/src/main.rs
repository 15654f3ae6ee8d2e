//! `q2t`: the command-line pipeline.
//!
//! Every subcommand that writes results also writes its effective
//! `config.toml` and `version.txt` into the output directory. Failures print
//! one `error[<kind>]: <message>` line on stderr and exit with the code of
//! their kind (see [`ExitKind`]).

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ConfigError;

#[derive(Parser, Debug)]
#[command(name = "q2t", version = env!("Q2T_VERSION"), about = "Complex query answering with a distance-biased query encoder")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set encoder.d1=64`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for every random stream (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Compute device; only `cpu` is available.
    #[arg(long, global = true)]
    pub device: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert id-based triple files and name maps into a split family.
    Ingest {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        valid: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// `name<TAB>id` entity map.
        #[arg(long)]
        entities: PathBuf,
        /// `name<TAB>id` relation map.
        #[arg(long)]
        relations: PathBuf,
    },
    /// Write a random split family for smoke runs.
    Synth {
        #[arg(long, default_value_t = 100)]
        entities: usize,
        #[arg(long, default_value_t = 10)]
        relations: usize,
        #[arg(long, default_value_t = 1000)]
        triples: usize,
        #[arg(long, default_value_t = 0.05)]
        valid_frac: f64,
        #[arg(long, default_value_t = 0.1)]
        test_frac: f64,
    },
    /// Generate train / valid / test query datasets.
    Sample {
        #[arg(long, env = "Q2T_DATA_DIR")]
        data: PathBuf,
    },
    /// Pretrain the link predictor on the training graph.
    Pretrain {
        #[arg(long, env = "Q2T_DATA_DIR")]
        data: PathBuf,
    },
    /// Train the query encoder against a pretrained link predictor.
    Train {
        /// Directory holding train.jsonl and optionally valid.jsonl.
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        kge: PathBuf,
    },
    /// Filtered MRR and HITS@k per query type.
    Eval {
        #[arg(long)]
        queries: PathBuf,
        /// Which dataset file to score: train, valid or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        kge: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
    },
    /// Rank entities for one query in nested-tuple form.
    Answer {
        /// e.g. `(7,(3,))` for a one-hop query.
        query: String,
        #[arg(long)]
        kge: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        /// Dataset directory for entity names and known answers.
        #[arg(long, env = "Q2T_DATA_DIR")]
        data: Option<PathBuf>,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
    },
    /// Train and evaluate once per value of one hyperparameter.
    Sweep {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        kge: PathBuf,
        /// label_smoothing (ls) or num_layers (layers); overrides sweep.axis.
        #[arg(long)]
        axis: Option<String>,
        /// Comma-separated values; overrides sweep.values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Render metric, sweep and loss CSVs into text tables and SVG plots.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Failure classes with distinct exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    Other = 1,
    Config = 2,
    Io = 3,
    Data = 4,
    Integrity = 5,
    Training = 6,
}

impl ExitKind {
    fn label(self) -> &'static str {
        match self {
            ExitKind::Other => "other",
            ExitKind::Config => "config",
            ExitKind::Io => "io",
            ExitKind::Data => "data",
            ExitKind::Integrity => "integrity",
            ExitKind::Training => "training",
        }
    }

    fn of(err: &anyhow::Error) -> ExitKind {
        for cause in err.chain() {
            if cause.is::<ConfigError>() {
                return ExitKind::Config;
            }
            if let Some(e) = cause.downcast_ref::<q2t::Error>() {
                use q2t::Error as E;
                return match e {
                    E::Io { .. } => ExitKind::Io,
                    E::Config(_) => ExitKind::Config,
                    E::Integrity(_) => ExitKind::Integrity,
                    E::NonFiniteLoss { .. } => ExitKind::Training,
                    _ => ExitKind::Data,
                };
            }
            if cause.is::<report::DataError>() || cause.is::<csv::Error>() {
                return ExitKind::Data;
            }
            if cause.is::<std::io::Error>() {
                return ExitKind::Io;
            }
        }
        ExitKind::Other
    }
}

/// The error chain on one line; causes already quoted by their parent are
/// not repeated.
fn one_line(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if msg.contains(&text) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&text);
    }
    msg.replace('\n', " ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = ExitKind::of(&err);
            let msg = one_line(&err);
            eprintln!("error[{}]: {msg}", kind.label());
            ExitCode::from(kind as u8)
        }
    }
}
