//! Training, optimization, and interpretation toolkit for a population-coded
//! convolutional spiking network aimed at imbalanced binary classification.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`diffcore`] — tape-based reverse-mode differentiation with a surrogate
//!   spike gradient and the Adam update rule
//! - [`csnpc`] — the fixed three-block convolutional spiking architecture,
//!   timestep-unrolled forward pass, and population spike-count decoding
//! - [`mossti`] — supervisory training loop, class-imbalance weighting,
//!   confusion metrics, and FPR-targeted threshold calibration
//! - [`rhoss`] — tabular Q-learning hyper-heuristic over the hyperparameter
//!   search space, with a random-search baseline
//! - [`fairness`] — sensitive-group partitioning, predictive equality, and
//!   the performance–fairness trade-off
//! - [`xai`] — input-gradient saliency and spike-activity profiling
//! - [`dataio`] — CSV ingestion, temporal splitting, normalization, and a
//!   seeded planted-signal generator for verification runs

pub mod csnpc;
pub mod dataio;
pub mod diffcore;
pub mod fairness;
pub mod mossti;
pub mod rhoss;
pub mod xai;

pub use csnpc::{Decoded, ForwardRecord, ModelConfig, ModelParams};
pub use dataio::{Dataset, GroupBias, Schema, SensitiveAttr};
pub use diffcore::{AdamState, DiffError, LifParams, SpikeMode, Tape, Tensor, TensorId};
pub use fairness::{FairnessReport, GroupSpec};
pub use mossti::{EvalMetrics, TrainConfig};
pub use rhoss::{HyperConfig, QTable, TrialResult};
pub use xai::{Explanation, SpikeActivity};
