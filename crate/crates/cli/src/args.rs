use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Debug, Parser)]
#[command(name = "mossti", version, about = "Population-coded spiking network for imbalanced binary classification: training, Q-learning hyperparameter search, fairness metrics, and explanations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command; unset flags fall back to the config file
/// and then to built-in defaults.
#[derive(Debug, Clone, Args, Default)]
pub struct CommonArgs {
    /// Run-config JSON file (flat object; flags override its values).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input data CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Schema JSON describing the data columns.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output population size P (even).
    #[arg(long)]
    pub population: Option<usize>,
    /// Simulation timesteps T.
    #[arg(long)]
    pub timesteps: Option<usize>,
    /// Training epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size.
    #[arg(long)]
    pub batch: Option<usize>,
    /// Hyper-heuristic trial budget.
    #[arg(long)]
    pub budget: Option<usize>,
    /// FPR target for threshold calibration.
    #[arg(long)]
    pub target_fpr: Option<f64>,
    /// Comma-separated alpha grid for fairness trade-offs.
    #[arg(long, value_delimiter = ',')]
    pub alpha_grid: Option<Vec<f64>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-signal synthetic dataset plus matching schema.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of rows.
        #[arg(long, default_value_t = 20_000)]
        rows: usize,
        /// Fraud prevalence in (0, 1).
        #[arg(long, default_value_t = 0.011)]
        prevalence: f64,
        /// Feature count.
        #[arg(long, default_value_t = 30)]
        features: usize,
        /// Comma-separated planted (signal-carrying) feature indices.
        #[arg(long, value_delimiter = ',', default_values_t = [0usize, 3, 7, 12, 21])]
        planted: Vec<usize>,
        /// Sensitive attribute to bias (age | income | employment).
        #[arg(long)]
        bias_attribute: Option<String>,
        /// Fraud prevalence for the group at/above the attribute's cut.
        #[arg(long, requires = "bias_attribute")]
        bias_high: Option<f64>,
        /// Fraud prevalence for the group below the cut.
        #[arg(long, requires = "bias_attribute")]
        bias_low: Option<f64>,
    },
    /// Train a model: temporal split, normalization, weighted training,
    /// threshold calibration, checkpoint and report emission.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Search the hyperparameter space with the Q-learning hyper-heuristic.
    Optimize {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on the test months: metrics plus fairness report.
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint manifest JSON written by train/optimize.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Explain individual rows: saliency, spike activity, predicted class.
    Explain {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint manifest JSON written by train/optimize.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated row indices into the data file.
        #[arg(long, value_delimiter = ',')]
        samples: Option<Vec<usize>>,
    },
}
