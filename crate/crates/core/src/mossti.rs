//! Supervisory training and evaluation: mini-batch loop with inverse-frequency
//! class weighting, confusion metrics, and FPR-targeted threshold calibration.

use crate::csnpc::{self, CsnpcError, ModelConfig, ModelParams};
use crate::dataio::Dataset;
use crate::diffcore::{adam_step, AdamState, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Samples per parallel gradient chunk. Fixed so that chunk boundaries, and
/// therefore floating-point summation order, do not depend on thread count.
const GRAD_CHUNK: usize = 16;

/// Rows per parallel scoring chunk; parameters are re-recorded per chunk.
const SCORE_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("input error: {0}")]
    Input(String),
    #[error("training diverged at epoch {epoch}: non-finite loss or gradient")]
    Diverged { epoch: usize },
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error(transparent)]
    Model(#[from] CsnpcError),
}

/// Confusion counts and rates at a fixed decision threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub fpr: f64,
    /// Recall.
    pub tpr: f64,
    pub tnr: f64,
    pub fnr: f64,
    pub accuracy: f64,
    /// True when either class is absent, making some rates fall back to 0.
    pub degenerate: bool,
}

impl EvalMetrics {
    pub fn from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> EvalMetrics {
        let negatives = fp + tn;
        let positives = tp + fn_;
        let total = positives + negatives;
        let fpr = if negatives > 0 {
            fp as f64 / negatives as f64
        } else {
            0.0
        };
        let tnr = if negatives > 0 {
            tn as f64 / negatives as f64
        } else {
            0.0
        };
        let tpr = if positives > 0 {
            tp as f64 / positives as f64
        } else {
            0.0
        };
        let fnr = if positives > 0 {
            fn_ as f64 / positives as f64
        } else {
            0.0
        };
        let accuracy = if total > 0 {
            (tp + tn) as f64 / total as f64
        } else {
            0.0
        };
        EvalMetrics {
            tp,
            fp,
            tn,
            fn_,
            fpr,
            tpr,
            tnr,
            fnr,
            accuracy,
            degenerate: positives == 0 || negatives == 0,
        }
    }
}

/// Inverse-frequency class weights, `w_c = total / (2 * count_c)`, normalized
/// so a balanced split yields `[1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    pub weights: [f64; 2],
    /// A class absent from the labels; its weight falls back to 1.
    pub missing_class: Option<usize>,
}

pub fn class_weights(labels: &[u8]) -> Result<ClassWeights, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::Input(
            "cannot derive class weights from an empty label array".into(),
        ));
    }
    let total = labels.len() as f64;
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let counts = [total - pos, pos];
    let mut weights = [1.0, 1.0];
    let mut missing_class = None;
    for c in 0..2 {
        if counts[c] > 0.0 {
            weights[c] = total / (2.0 * counts[c]);
        } else {
            missing_class = Some(c);
        }
    }
    Ok(ClassWeights {
        weights,
        missing_class,
    })
}

/// Exact confusion counts; an instance is positive iff `score >= threshold`.
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<EvalMetrics, TrainError> {
    if scores.len() != labels.len() {
        return Err(TrainError::Input(format!(
            "scores ({}) and labels ({}) lengths differ",
            scores.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for (&score, &label) in scores.iter().zip(labels) {
        match (score >= threshold, label == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(EvalMetrics::from_counts(tp, fp, tn, fn_))
}

/// Smallest threshold, among observed negative-instance scores plus infinity,
/// whose false-positive rate stays at or below the target; the achieved FPR is
/// the largest one not exceeding the target.
pub fn calibrate_threshold(
    scores: &[f64],
    labels: &[u8],
    target_fpr: f64,
) -> Result<f64, TrainError> {
    if scores.len() != labels.len() {
        return Err(TrainError::Input(format!(
            "scores ({}) and labels ({}) lengths differ",
            scores.len(),
            labels.len()
        )));
    }
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(TrainError::Input(format!(
            "target FPR must lie in [0, 1], got {target_fpr}"
        )));
    }
    let mut negatives: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    if negatives.is_empty() {
        return Err(TrainError::Calibration(
            "no negative instances to calibrate against".into(),
        ));
    }
    negatives.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    let n = negatives.len() as f64;
    let mut best = f64::INFINITY;
    let mut at_or_above = 0usize;
    let mut i = 0;
    while i < negatives.len() {
        let candidate = negatives[i];
        // Count every duplicate of this value at once.
        let mut j = i;
        while j < negatives.len() && negatives[j] == candidate {
            j += 1;
        }
        at_or_above = j;
        let fpr = at_or_above as f64 / n;
        if fpr <= target_fpr {
            best = candidate;
            i = j;
        } else {
            break;
        }
    }
    let _ = at_or_above;
    Ok(best)
}

/// Scores every row with the model's fraud score, preserving row order.
pub fn scores(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &Dataset,
) -> Result<Vec<f64>, TrainError> {
    if dataset.num_features != config.num_features {
        return Err(TrainError::Input(format!(
            "dataset has {} features but model expects {}",
            dataset.num_features, config.num_features
        )));
    }
    let rows: Vec<usize> = (0..dataset.len()).collect();
    let chunks: Result<Vec<Vec<f64>>, CsnpcError> = rows
        .par_chunks(SCORE_CHUNK)
        .map_init(Tape::new, |tape, chunk| {
            tape.reset();
            let ids = csnpc::record_params(tape, params, false);
            let mark = tape.mark();
            let mut out = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let graph =
                    csnpc::record_forward(tape, &ids, config, &dataset.row_tensor(i), false)?;
                let counts = tape.value(graph.counts);
                out.push(csnpc::decode_counts([counts[0], counts[1]]).fraud_score);
                tape.truncate(&mark);
            }
            Ok(out)
        })
        .collect();
    Ok(chunks?.into_iter().flatten().collect())
}

/// Scores the dataset and folds it through [`confusion`] at the threshold.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &Dataset,
    threshold: f64,
) -> Result<EvalMetrics, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::Input("cannot evaluate an empty dataset".into()));
    }
    let s = scores(params, config, dataset)?;
    confusion(&s, &dataset.labels, threshold)
}

/// Optimizer and loop settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// Multiplicative retention factor applied before each Adam delta.
    pub weight: f64,
    /// Epochs without validation-recall improvement before stopping; 0 turns
    /// early stopping off.
    pub early_stop_patience: usize,
    pub rng_seed: u64,
    /// FPR target for per-epoch validation calibration.
    pub target_fpr: f64,
    /// Override for the loss class weights; `None` derives inverse-frequency
    /// weights from the training labels.
    pub class_weights: Option<[f64; 2]>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 3e-4,
            adam_beta1: 0.98,
            adam_beta2: 0.99,
            weight: 1.0,
            early_stop_patience: 0,
            rng_seed: 0,
            target_fpr: 0.05,
            class_weights: None,
        }
    }
}

/// One epoch's training loss and validation outcome.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// Threshold calibrated on the validation split this epoch.
    pub threshold: f64,
    pub val: EvalMetrics,
}

struct ParamLayout {
    offsets: [usize; 8],
    total: usize,
}

fn layout(params: &ModelParams) -> ParamLayout {
    let mut offsets = [0usize; 8];
    let mut total = 0;
    for (slot, (_, t)) in offsets.iter_mut().zip(params.named()) {
        *slot = total;
        total += t.len();
    }
    ParamLayout { offsets, total }
}

/// Weighted loss and parameter gradient for a contiguous run of samples.
///
/// Parameters are recorded once on a reused tape; each sample's graph is
/// recorded, backpropagated, and rewound, so the working set stays
/// cache-sized while the parameter leaves accumulate the chunk gradient
/// across backward calls.
fn chunk_grad(
    tape: &mut Tape,
    params: &ModelParams,
    config: &ModelConfig,
    train: &Dataset,
    chunk: &[usize],
    weights: [f64; 2],
    lay: &ParamLayout,
) -> Result<(f64, Vec<f64>), TrainError> {
    tape.reset();
    let ids = csnpc::record_params(tape, params, true);
    let mark = tape.mark();
    let mut loss_sum = 0.0;
    for &i in chunk {
        let x = train.row_tensor(i);
        let graph = csnpc::record_forward(tape, &ids, config, &x, false)?;
        let loss = tape
            .weighted_ce(graph.counts, train.labels[i] as usize, weights)
            .map_err(CsnpcError::from)?;
        loss_sum += tape.value(loss)[0];
        tape.backward(loss).map_err(CsnpcError::from)?;
        tape.truncate(&mark);
    }
    let mut grad = vec![0.0; lay.total];
    for (slot, id) in lay.offsets.iter().zip(ids.as_array()) {
        let g = tape.grad(id).expect("parameter leaves carry gradients");
        grad[*slot..*slot + g.len()].copy_from_slice(g);
    }
    Ok((loss_sum, grad))
}

/// Shuffled mini-batch training with per-batch mean weighted loss and Adam
/// updates; per-epoch validation drives threshold calibration and optional
/// early stopping on recall (which also restores the best-epoch weights).
/// Deterministic for a fixed seed regardless of thread count.
pub fn train(
    mut params: ModelParams,
    config: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    tc: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochStats>), TrainError> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Input("training and validation sets must be non-empty".into()));
    }
    for (role, ds) in [("train", train_set), ("validation", val_set)] {
        if ds.num_features != config.num_features {
            return Err(TrainError::Input(format!(
                "{role} set has {} features but model expects {}",
                ds.num_features, config.num_features
            )));
        }
    }
    if tc.batch_size == 0 {
        return Err(TrainError::Input("batch_size must be positive".into()));
    }
    let mut history = Vec::new();
    if tc.epochs == 0 {
        return Ok((params, history));
    }
    let weights = match tc.class_weights {
        Some(w) => w,
        None => class_weights(&train_set.labels)?.weights,
    };
    let lay = layout(&params);
    let mut adam: Vec<AdamState> = params
        .named()
        .iter()
        .map(|(_, t)| AdamState::new(t.len()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.rng_seed);
    let mut indices: Vec<usize> = (0..train_set.len()).collect();
    let mut best_recall = f64::NEG_INFINITY;
    let mut best_params: Option<ModelParams> = None;
    let mut stale_epochs = 0usize;

    for epoch in 0..tc.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in indices.chunks(tc.batch_size) {
            let pieces: Result<Vec<(f64, Vec<f64>)>, TrainError> = batch
                .par_chunks(GRAD_CHUNK)
                .map_init(Tape::new, |tape, chunk| {
                    chunk_grad(tape, &params, config, train_set, chunk, weights, &lay)
                })
                .collect();
            let mut grad = vec![0.0; lay.total];
            let mut batch_loss = 0.0;
            for (loss_sum, g) in pieces? {
                batch_loss += loss_sum;
                for (dst, gi) in grad.iter_mut().zip(&g) {
                    *dst += gi;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            // The hard spike threshold maps non-finite membranes to silence,
            // so blowups surface in the gradients even when the loss stays
            // finite; guard both.
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { epoch });
            }
            epoch_loss += batch_loss;
            grad.iter_mut().for_each(|g| *g *= inv);
            for ((tensor, state), offset) in params
                .tensors_mut()
                .into_iter()
                .zip(adam.iter_mut())
                .zip(lay.offsets)
            {
                let len = tensor.len();
                adam_step(
                    tensor.data_mut(),
                    &grad[offset..offset + len],
                    state,
                    tc.lr,
                    tc.adam_beta1,
                    tc.adam_beta2,
                    tc.weight,
                )
                .map_err(CsnpcError::from)?;
            }
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_scores = scores(&params, config, val_set)?;
        let threshold = calibrate_threshold(&val_scores, &val_set.labels, tc.target_fpr)?;
        let val = confusion(&val_scores, &val_set.labels, threshold)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            threshold,
            val,
        });
        if tc.early_stop_patience > 0 {
            if val.tpr > best_recall {
                best_recall = val.tpr;
                best_params = Some(params.clone());
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= tc.early_stop_patience {
                    break;
                }
            }
        }
    }
    // With early stopping on, hand back the weights from the best validation
    // epoch rather than wherever the loop halted.
    if let Some(best) = best_params {
        params = best;
    }
    Ok((params, history))
}
