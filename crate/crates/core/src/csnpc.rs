//! Convolutional spiking network with population-coded outputs.
//!
//! Fixed architecture: three conv(kernel 2) + maxpool(2) + LIF blocks with
//! 32, 128, and 256 filters, a dense projection onto a spiking population of
//! `P` neurons, and an output LIF layer. The network is unrolled over `T`
//! timesteps with the input injected as a constant current at every step;
//! prediction sums each class's population spikes over all steps and takes
//! the argmax, ties falling to class 0.

use crate::diffcore::{DiffError, LifParams, SpikeMode, Tape, Tensor, TensorId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONV1_FILTERS: usize = 32;
pub const CONV2_FILTERS: usize = 128;
pub const CONV3_FILTERS: usize = 256;
pub const KERNEL: usize = 2;
/// Three conv/pool blocks of kernel 2 need at least this many input features
/// to leave a non-empty sequence after the last pooling.
pub const MIN_FEATURES: usize = 15;

#[derive(Debug, Error)]
pub enum CsnpcError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Architecture and neuron constants for one model instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output population size `P`; even, split half per class.
    pub population: usize,
    /// Number of simulation steps `T`.
    pub timesteps: usize,
    /// Input feature count (sequence length of the single input channel).
    pub num_features: usize,
    /// Membrane decay per LIF layer, each in (0, 1).
    pub decays: [f64; 4],
    /// Firing threshold per LIF layer, each > 0.
    pub thresholds: [f64; 4],
    /// Surrogate spike slope shared by all layers.
    pub sigma: f64,
}

impl ModelConfig {
    pub fn new(
        population: usize,
        timesteps: usize,
        num_features: usize,
        decays: [f64; 4],
        thresholds: [f64; 4],
        sigma: f64,
    ) -> Result<Self, CsnpcError> {
        let cfg = ModelConfig {
            population,
            timesteps,
            num_features,
            decays,
            thresholds,
            sigma,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CsnpcError> {
        if self.population == 0 || self.population % 2 != 0 {
            return Err(CsnpcError::Config(format!(
                "population must be even and positive, got {}",
                self.population
            )));
        }
        if self.timesteps == 0 {
            return Err(CsnpcError::Config("timesteps must be positive".into()));
        }
        if self.num_features < MIN_FEATURES {
            return Err(CsnpcError::Config(format!(
                "num_features must be >= {MIN_FEATURES} so the conv/pool chain keeps length >= 1, got {}",
                self.num_features
            )));
        }
        for (i, b) in self.decays.iter().enumerate() {
            if !(*b > 0.0 && *b < 1.0) {
                return Err(CsnpcError::Config(format!(
                    "decay beta{} must lie in (0, 1), got {b}",
                    i + 1
                )));
            }
        }
        for (i, t) in self.thresholds.iter().enumerate() {
            if !(*t > 0.0) {
                return Err(CsnpcError::Config(format!(
                    "threshold theta{} must be > 0, got {t}",
                    i + 1
                )));
            }
        }
        if !(self.sigma > 0.0) {
            return Err(CsnpcError::Config(format!(
                "sigma must be > 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    fn lif(&self, layer: usize) -> LifParams {
        LifParams {
            beta: self.decays[layer],
            theta: self.thresholds[layer],
            sigma: self.sigma,
        }
    }

    /// Sequence lengths after each conv and pool: `[c1, p1, c2, p2, c3, p3]`.
    pub fn length_chain(&self) -> [usize; 6] {
        let c1 = self.num_features - KERNEL + 1;
        let p1 = c1 / 2;
        let c2 = p1 - KERNEL + 1;
        let p2 = c2 / 2;
        let c3 = p2 - KERNEL + 1;
        let p3 = c3 / 2;
        [c1, p1, c2, p2, c3, p3]
    }

    /// Flattened feature count entering the dense projection.
    pub fn flat_features(&self) -> usize {
        CONV3_FILTERS * self.length_chain()[5]
    }
}

/// All learnable tensors of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub conv3_w: Tensor,
    pub conv3_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

impl ModelParams {
    /// Parameter tensors with stable names, in serialization order.
    pub fn named(&self) -> [(&'static str, &Tensor); 8] {
        [
            ("conv1_w", &self.conv1_w),
            ("conv1_b", &self.conv1_b),
            ("conv2_w", &self.conv2_w),
            ("conv2_b", &self.conv2_b),
            ("conv3_w", &self.conv3_w),
            ("conv3_b", &self.conv3_b),
            ("fc_w", &self.fc_w),
            ("fc_b", &self.fc_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.conv3_w,
            &mut self.conv3_b,
            &mut self.fc_w,
            &mut self.fc_b,
        ]
    }
}

/// Exact number of scalar weights and biases.
pub fn count_params(params: &ModelParams) -> usize {
    params.named().iter().map(|(_, t)| t.len()).sum()
}

/// Seeded He-style uniform initialization (`limit = sqrt(6 / fan_in)`);
/// biases start at zero. The same seed always yields identical parameters.
pub fn build(config: &ModelConfig, rng_seed: u64) -> Result<ModelParams, CsnpcError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let flat = config.flat_features();
    let p = config.population;
    let mut init = |shape: Vec<usize>, fan_in: usize| {
        let limit = (6.0 / fan_in as f64).sqrt();
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
        Tensor::new(shape, data).expect("consistent init shape")
    };
    Ok(ModelParams {
        conv1_w: init(vec![CONV1_FILTERS, 1, KERNEL], KERNEL),
        conv1_b: Tensor::zeros(vec![CONV1_FILTERS]),
        conv2_w: init(
            vec![CONV2_FILTERS, CONV1_FILTERS, KERNEL],
            CONV1_FILTERS * KERNEL,
        ),
        conv2_b: Tensor::zeros(vec![CONV2_FILTERS]),
        conv3_w: init(
            vec![CONV3_FILTERS, CONV2_FILTERS, KERNEL],
            CONV2_FILTERS * KERNEL,
        ),
        conv3_b: Tensor::zeros(vec![CONV3_FILTERS]),
        fc_w: init(vec![p, flat], flat),
        fc_b: Tensor::zeros(vec![p]),
    })
}

/// Tape ids of the parameter leaves inside a recorded graph.
#[derive(Debug, Clone, Copy)]
pub struct ParamIds {
    pub conv1_w: TensorId,
    pub conv1_b: TensorId,
    pub conv2_w: TensorId,
    pub conv2_b: TensorId,
    pub conv3_w: TensorId,
    pub conv3_b: TensorId,
    pub fc_w: TensorId,
    pub fc_b: TensorId,
}

impl ParamIds {
    pub fn as_array(&self) -> [TensorId; 8] {
        [
            self.conv1_w,
            self.conv1_b,
            self.conv2_w,
            self.conv2_b,
            self.conv3_w,
            self.conv3_b,
            self.fc_w,
            self.fc_b,
        ]
    }
}

/// Tape ids recorded for one timestep (per LIF layer: input current,
/// membrane, spikes).
#[derive(Debug, Clone, Copy)]
pub struct StepIds {
    pub currents: [TensorId; 4],
    pub membranes: [TensorId; 4],
    pub spikes: [TensorId; 4],
}

/// A timestep-unrolled forward graph recorded on a tape.
pub struct Graph {
    pub x: TensorId,
    pub params: ParamIds,
    pub steps: Vec<StepIds>,
    /// Cumulative per-class spike-count pair through the last step.
    pub counts: TensorId,
    /// Optional loss head (present when a label was supplied).
    pub loss: Option<TensorId>,
}

/// Options for [`unroll`]: gradient flags, spike mode, and an optional
/// weighted cross-entropy head.
#[derive(Debug, Clone, Copy)]
pub struct UnrollOptions {
    pub mode: SpikeMode,
    pub params_grad: bool,
    pub input_grad: bool,
    pub loss: Option<(usize, [f64; 2])>,
}

impl Default for UnrollOptions {
    fn default() -> Self {
        UnrollOptions {
            mode: SpikeMode::Binary,
            params_grad: false,
            input_grad: false,
            loss: None,
        }
    }
}

/// Copies the parameter tensors onto a tape as leaves, once; any number of
/// forward graphs recorded afterwards share them.
pub fn record_params(tape: &mut Tape, params: &ModelParams, requires_grad: bool) -> ParamIds {
    ParamIds {
        conv1_w: tape.leaf(&params.conv1_w, requires_grad),
        conv1_b: tape.leaf(&params.conv1_b, requires_grad),
        conv2_w: tape.leaf(&params.conv2_w, requires_grad),
        conv2_b: tape.leaf(&params.conv2_b, requires_grad),
        conv3_w: tape.leaf(&params.conv3_w, requires_grad),
        conv3_b: tape.leaf(&params.conv3_b, requires_grad),
        fc_w: tape.leaf(&params.fc_w, requires_grad),
        fc_b: tape.leaf(&params.fc_b, requires_grad),
    }
}

/// Records one sample's unrolled forward pass against already-recorded
/// parameter leaves. No loss head is attached; append one with
/// [`Tape::weighted_ce`] on `Graph::counts` when training.
///
/// The conv1/pool1 current is computed once and fed to every step: the input
/// is constant across time, so the first block's output is too.
pub fn record_forward(
    tape: &mut Tape,
    ids: &ParamIds,
    config: &ModelConfig,
    x: &Tensor,
    input_grad: bool,
) -> Result<Graph, CsnpcError> {
    config.validate()?;
    if x.shape() != [1, config.num_features] {
        return Err(CsnpcError::Diff(DiffError::shape(
            "forward",
            format!(
                "input shape {:?} does not match [1, {}]",
                x.shape(),
                config.num_features
            ),
        )));
    }
    let x_id = tape.leaf(x, input_grad);

    let chain = config.length_chain();
    let shapes = [
        vec![CONV1_FILTERS, chain[1]],
        vec![CONV2_FILTERS, chain[3]],
        vec![CONV3_FILTERS, chain[5]],
        vec![config.population],
    ];
    let mut membranes: Vec<TensorId> = shapes.iter().map(|s| tape.zeros(s.clone())).collect();
    let mut spikes: Vec<TensorId> = shapes.iter().map(|s| tape.zeros(s.clone())).collect();

    // Constant-current encoding: the same input drives every timestep.
    let c1 = tape.conv1d(x_id, ids.conv1_w, ids.conv1_b)?;
    let cur1 = tape.maxpool1d(c1)?;

    let mut counts = tape.zeros(vec![2]);
    let mut steps = Vec::with_capacity(config.timesteps);
    for _ in 0..config.timesteps {
        let (s1, u1) = tape.lif_step(cur1, membranes[0], spikes[0], &config.lif(0))?;
        let c2 = tape.conv1d(s1, ids.conv2_w, ids.conv2_b)?;
        let cur2 = tape.maxpool1d(c2)?;
        let (s2, u2) = tape.lif_step(cur2, membranes[1], spikes[1], &config.lif(1))?;
        let c3 = tape.conv1d(s2, ids.conv3_w, ids.conv3_b)?;
        let cur3 = tape.maxpool1d(c3)?;
        let (s3, u3) = tape.lif_step(cur3, membranes[2], spikes[2], &config.lif(2))?;
        let flat = tape.flatten(s3);
        let z = tape.linear(flat, ids.fc_w, ids.fc_b)?;
        let (s4, u4) = tape.lif_step(z, membranes[3], spikes[3], &config.lif(3))?;
        let step_counts = tape.sum_halves(s4)?;
        counts = tape.add(counts, step_counts)?;
        membranes = vec![u1, u2, u3, u4];
        spikes = vec![s1, s2, s3, s4];
        steps.push(StepIds {
            currents: [cur1, cur2, cur3, z],
            membranes: [u1, u2, u3, u4],
            spikes: [s1, s2, s3, s4],
        });
    }
    Ok(Graph {
        x: x_id,
        params: *ids,
        steps,
        counts,
        loss: None,
    })
}

/// Records the full unrolled forward pass onto a fresh tape.
pub fn unroll(
    params: &ModelParams,
    config: &ModelConfig,
    x: &Tensor,
    opts: UnrollOptions,
) -> Result<(Tape, Graph), CsnpcError> {
    let mut tape = Tape::with_spike_mode(opts.mode);
    let ids = record_params(&mut tape, params, opts.params_grad);
    let mut graph = record_forward(&mut tape, &ids, config, x, opts.input_grad)?;
    if let Some((label, weights)) = opts.loss {
        graph.loss = Some(tape.weighted_ce(graph.counts, label, weights)?);
    }
    Ok((tape, graph))
}

/// Per-layer tensors captured at each timestep.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub currents: Vec<Tensor>,
    pub spikes: Vec<Tensor>,
    pub membranes: Vec<Tensor>,
}

/// Stacked per-timestep outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    /// One trace per LIF layer, each list of length `T`.
    pub layers: Vec<LayerTrace>,
    /// Output-layer spikes, shape `[T, P]`, entries 0 or 1.
    pub out_spikes: Tensor,
}

/// Runs the forward pass and materializes the full record.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    x: &Tensor,
) -> Result<ForwardRecord, CsnpcError> {
    let (tape, graph) = unroll(params, config, x, UnrollOptions::default())?;
    Ok(extract_record(&tape, &graph, config))
}

pub(crate) fn extract_record(tape: &Tape, graph: &Graph, config: &ModelConfig) -> ForwardRecord {
    let t_steps = graph.steps.len();
    let p = config.population;
    let mut layers: Vec<LayerTrace> = (0..4)
        .map(|_| LayerTrace {
            currents: Vec::with_capacity(t_steps),
            spikes: Vec::with_capacity(t_steps),
            membranes: Vec::with_capacity(t_steps),
        })
        .collect();
    let mut out = Vec::with_capacity(t_steps * p);
    for step in &graph.steps {
        for (layer, trace) in layers.iter_mut().enumerate() {
            trace.currents.push(tape.tensor(step.currents[layer]));
            trace.membranes.push(tape.tensor(step.membranes[layer]));
            trace.spikes.push(tape.tensor(step.spikes[layer]));
        }
        out.extend_from_slice(tape.value(step.spikes[3]));
    }
    ForwardRecord {
        layers,
        out_spikes: Tensor::new(vec![t_steps, p], out).expect("record shape"),
    }
}

/// Population decoding result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    /// Argmax class; ties fall to class 0.
    pub predicted: usize,
    /// Summed spikes per class population over all timesteps.
    pub counts: [f64; 2],
    /// Laplace-smoothed fraud spike fraction `(n1 + 1) / (n0 + n1 + 2)`.
    pub fraud_score: f64,
}

/// Sums each class population's spikes over all timesteps and picks the
/// larger; neurons `0..P/2` belong to class 0, the rest to class 1.
pub fn decode(record: &ForwardRecord, population: usize) -> Result<Decoded, CsnpcError> {
    if population == 0 || population % 2 != 0 {
        return Err(CsnpcError::Config(format!(
            "population must be even and positive, got {population}"
        )));
    }
    let shape = record.out_spikes.shape();
    if shape.len() != 2 || shape[1] != population {
        return Err(CsnpcError::Diff(DiffError::shape(
            "decode",
            format!("out_spikes shape {shape:?} does not match population {population}"),
        )));
    }
    let half = population / 2;
    let mut counts = [0.0, 0.0];
    for row in record.out_spikes.data().chunks_exact(population) {
        counts[0] += row[..half].iter().sum::<f64>();
        counts[1] += row[half..].iter().sum::<f64>();
    }
    Ok(decode_counts(counts))
}

pub(crate) fn decode_counts(counts: [f64; 2]) -> Decoded {
    let predicted = usize::from(counts[1] > counts[0]);
    let fraud_score = (counts[1] + 1.0) / (counts[0] + counts[1] + 2.0);
    Decoded {
        predicted,
        counts,
        fraud_score,
    }
}

/// Forward pass returning only the decoded outcome, without materializing the
/// per-step record. Matches `decode(forward(..))` exactly.
pub fn score(
    params: &ModelParams,
    config: &ModelConfig,
    x: &Tensor,
) -> Result<Decoded, CsnpcError> {
    let (tape, graph) = unroll(params, config, x, UnrollOptions::default())?;
    let c = tape.value(graph.counts);
    Ok(decode_counts([c[0], c[1]]))
}

/// Weighted spike-count cross-entropy of a recorded forward pass.
///
/// This evaluates the same scalar the training graph optimizes; the
/// gradient-carrying path (backpropagation through all `T` steps) is the
/// loss head recorded by [`unroll`].
pub fn loss(
    record: &ForwardRecord,
    label: usize,
    class_weights: [f64; 2],
) -> Result<Tensor, CsnpcError> {
    let shape = record.out_spikes.shape();
    if shape.len() != 2 || shape[1] % 2 != 0 || shape[1] == 0 {
        return Err(CsnpcError::Diff(DiffError::shape(
            "loss",
            format!("out_spikes shape {shape:?} is not [T, P] with even P"),
        )));
    }
    let population = shape[1];
    let half = population / 2;
    let mut counts = [0.0, 0.0];
    for row in record.out_spikes.data().chunks_exact(population) {
        counts[0] += row[..half].iter().sum::<f64>();
        counts[1] += row[half..].iter().sum::<f64>();
    }
    let mut tape = Tape::new();
    let c = tape.leaf_owned(vec![2], counts.to_vec(), false);
    let l = tape.weighted_ce(c, label, class_weights)?;
    Ok(tape.tensor(l))
}
