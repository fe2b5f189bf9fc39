//! `spackle`: the completion pipeline as subcommands.
//!
//! ```text
//! spackle synth --out data/raw
//! spackle normalize --data data/raw --out data/norm
//! spackle select-genes --data data/norm --out data/sel
//! spackle median-complete --data data/sel --out data/med
//! spackle train --data data/med --out runs
//! spackle sweep --data data/med --checkpoint runs/<run>/checkpoint.json --out runs
//! ```
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid input.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spackle_core::dataset::Split;

use config::Precision;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(spackle_core::Error),
    Io(PathBuf, std::io::Error),
}

impl From<spackle_core::Error> for CliError {
    fn from(e: spackle_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_validation() => 3,
            CliError::Core(_) | CliError::Io(..) => 1,
        }
    }

    fn category(&self) -> &'static str {
        match self.exit_code() {
            2 => "usage error",
            3 => "invalid input",
            _ => "runtime error",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "{}: {e}", p.display()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "spackle",
    version,
    about = "Masked-transformer completion of spatial transcriptomics data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Global seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long)]
    pub threads: Option<usize>,
    /// TOML file with run settings; flags take precedence
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    #[arg(long)]
    pub d_k: Option<usize>,
    #[arg(long)]
    pub num_layers: Option<usize>,
    #[arg(long)]
    pub num_heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    /// Learned embedding of each token's hop ring
    #[arg(long)]
    pub ring_embedding: Option<bool>,
    /// Floating-point type for the network: f32 or f64
    #[arg(long)]
    pub precision: Option<Precision>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Training masking probability
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub val_every: Option<usize>,
    /// Samples per gradient work unit
    #[arg(long)]
    pub chunk_size: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic hex-lattice dataset
    Synth {
        #[arg(long, default_value_t = 2)]
        slides: usize,
        #[arg(long, default_value_t = 30)]
        rows: u32,
        #[arg(long, default_value_t = 30)]
        cols: u32,
        #[arg(long, default_value_t = 32)]
        genes: usize,
        #[arg(long, default_value_t = 0.3)]
        dropout: f64,
        /// Shortest wavelength of the expression fields, in spot pitches
        #[arg(long, default_value_t = 3.0)]
        smoothness: f64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Check a dataset directory and print a summary
    Validate {
        #[arg(long)]
        data: PathBuf,
        /// Treat zero counts as unobserved
        #[arg(long)]
        zeros_are_missing: bool,
    },
    /// Log-TPM normalize raw counts
    Normalize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop spots whose observed counts sum to zero instead of failing
        #[arg(long)]
        drop_empty_spots: bool,
        #[arg(long)]
        zeros_are_missing: bool,
    },
    /// Keep the genes with the highest Moran's I
    SelectGenes {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of genes to keep
        #[arg(long)]
        num_genes: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Fill missing entries with the adaptive median filter
    MedianComplete {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_radius_hops: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the completion model
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Parent directory of the run directory
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Grid search over learning rates with short training runs
    LrSearch {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated learning rates
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        /// Iterations per candidate
        #[arg(long)]
        search_iterations: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Replace every missing entry with the model's reconstruction
    Complete {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score the model and the median filter on one masked fraction
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        split: Option<Split>,
        #[command(flatten)]
        common: Common,
    },
    /// Score both methods over a range of masked fractions
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated masked fractions
        #[arg(long, value_delimiter = ',')]
        rhos: Option<Vec<f64>>,
        #[arg(long)]
        split: Option<Split>,
        /// Skip the SVG chart
        #[arg(long)]
        no_plot: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Print the 2-hop neighbourhood of one spot
    Neighbors {
        #[arg(long)]
        data: PathBuf,
        /// Slide id (default: the first slide)
        #[arg(long)]
        slide: Option<String>,
        #[arg(long)]
        row: u32,
        #[arg(long)]
        col: u32,
        #[arg(long, default_value_t = 2)]
        hops: u32,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spackle: {}: {e}", e.category());
            ExitCode::from(e.exit_code())
        }
    }
}
