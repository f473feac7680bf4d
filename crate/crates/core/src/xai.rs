//! Dual-path explainability: input-gradient saliency and spike-activity
//! profiling.
//!
//! Saliency backpropagates an unweighted cross-entropy between the cumulative
//! per-class spike counts and a target class, returning the absolute input
//! gradient. Spike activity sums the output population's spikes over the
//! simulation window, per neuron and per class. [`explain`] produces both
//! from a single forward pass.

use crate::csnpc::{
    self, decode_counts, CsnpcError, ModelConfig, ModelParams, UnrollOptions,
};
use crate::diffcore::{SpikeMode, Tensor};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum XaiError {
    #[error("input error: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] CsnpcError),
}

/// Output-population spike totals over the simulation window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpikeActivity {
    /// Spike count per output neuron; each entry lies in `[0, T]`.
    pub per_neuron: Vec<f64>,
    /// Population sums per class (neurons `0..P/2`, then `P/2..P`).
    pub per_class: [f64; 2],
}

/// Combined explanation for one instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Explanation {
    /// Absolute loss gradient per input feature.
    pub saliency: Vec<f64>,
    pub spike_activity: SpikeActivity,
    pub predicted: usize,
}

fn unweighted_ce_grad(
    params: &ModelParams,
    config: &ModelConfig,
    x: &Tensor,
    y: usize,
    mode: SpikeMode,
) -> Result<(Vec<f64>, SpikeActivity, usize), XaiError> {
    let opts = UnrollOptions {
        mode,
        input_grad: true,
        loss: Some((y, [1.0, 1.0])),
        ..UnrollOptions::default()
    };
    let (mut tape, graph) = csnpc::unroll(params, config, x, opts)?;
    let activity = activity_from_steps(&tape, &graph, config);
    let counts = tape.value(graph.counts);
    let predicted = decode_counts([counts[0], counts[1]]).predicted;
    let loss = graph.loss.expect("loss head requested");
    tape.backward(loss).map_err(CsnpcError::from)?;
    let saliency: Vec<f64> = tape
        .grad(graph.x)
        .expect("input flagged for gradients")
        .iter()
        .map(|g| g.abs())
        .collect();
    Ok((saliency, activity, predicted))
}

fn activity_from_steps(
    tape: &crate::diffcore::Tape,
    graph: &csnpc::Graph,
    config: &ModelConfig,
) -> SpikeActivity {
    let p = config.population;
    let mut per_neuron = vec![0.0; p];
    for step in &graph.steps {
        for (acc, s) in per_neuron.iter_mut().zip(tape.value(step.spikes[3])) {
            *acc += s;
        }
    }
    let half = p / 2;
    let per_class = [
        per_neuron[..half].iter().sum(),
        per_neuron[half..].iter().sum(),
    ];
    SpikeActivity {
        per_neuron,
        per_class,
    }
}

/// Absolute gradient of the unweighted spike-count cross-entropy with respect
/// to each input feature, using the same surrogate backward as training.
pub fn saliency(
    params: &ModelParams,
    config: &ModelConfig,
    x: &Tensor,
    y: usize,
) -> Result<Vec<f64>, XaiError> {
    saliency_with_mode(params, config, x, y, SpikeMode::Binary)
}

/// Saliency under an explicit spike mode. The relaxed mode makes the forward
/// pass differentiable so the result can be checked against finite
/// differences.
pub fn saliency_with_mode(
    params: &ModelParams,
    config: &ModelConfig,
    x: &Tensor,
    y: usize,
    mode: SpikeMode,
) -> Result<Vec<f64>, XaiError> {
    if y > 1 {
        return Err(XaiError::Input(format!("class index must be 0 or 1, got {y}")));
    }
    Ok(unweighted_ce_grad(params, config, x, y, mode)?.0)
}

/// Per-neuron and per-class output spike counts over all timesteps.
pub fn spike_activity(
    params: &ModelParams,
    config: &ModelConfig,
    x: &Tensor,
) -> Result<SpikeActivity, XaiError> {
    let (tape, graph) = csnpc::unroll(params, config, x, UnrollOptions::default())?;
    Ok(activity_from_steps(&tape, &graph, config))
}

/// Saliency, spike activity, and the predicted class from one shared forward
/// pass.
pub fn explain(
    params: &ModelParams,
    config: &ModelConfig,
    x: &Tensor,
    y: usize,
) -> Result<Explanation, XaiError> {
    if y > 1 {
        return Err(XaiError::Input(format!("class index must be 0 or 1, got {y}")));
    }
    let (saliency, spike_activity, predicted) =
        unweighted_ce_grad(params, config, x, y, SpikeMode::Binary)?;
    Ok(Explanation {
        saliency,
        spike_activity,
        predicted,
    })
}

/// Mean saliency per feature across samples, normalized to sum to 1. Each
/// sample is attributed against its own predicted class.
pub fn aggregate_importance(
    params: &ModelParams,
    config: &ModelConfig,
    samples: &[Tensor],
) -> Result<Vec<f64>, XaiError> {
    if samples.is_empty() {
        return Err(XaiError::Input(
            "aggregate importance needs at least one sample".into(),
        ));
    }
    let mut mean = vec![0.0; config.num_features];
    for x in samples {
        let predicted = csnpc::score(params, config, x)?.predicted;
        let s = saliency(params, config, x, predicted)?;
        for (acc, v) in mean.iter_mut().zip(&s) {
            *acc += v;
        }
    }
    let inv = 1.0 / samples.len() as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    let total: f64 = mean.iter().sum();
    if total > 0.0 {
        mean.iter_mut().for_each(|v| *v /= total);
    }
    Ok(mean)
}
