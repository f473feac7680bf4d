//! Operation tape and backward sweep.
//!
//! Nodes are stored in topological order by construction: an operation can
//! only reference tensors that already exist, so replaying the node list in
//! reverse visits every consumer before its producers. Node values live in
//! one contiguous arena and [`Tape::reset`] recycles all buffers, so hot
//! loops (per-sample unrolls, batched training chunks) run without
//! reallocating. Gradient buffers of flagged leaves accumulate additively
//! across fan-out and across repeated backward calls; [`Tape::zero_grad`]
//! resets them.

use super::{relaxed_spike_scalar, surrogate_grad_scalar, DiffError, LifParams, SpikeMode, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Precomputed views of one kernel-2 convolution weight.
struct ConvPrep {
    /// Tap-major: `wd[c * 2*C_in + kk * C_in + d]`.
    wd: Vec<f64>,
    /// Column-major over output channels: `wt[(kk * C_in + d) * C_out + c]`.
    wt: Vec<f64>,
}

/// Rewind point for [`Tape::truncate`].
#[derive(Debug, Clone, Copy)]
pub struct TapeMark {
    nodes: usize,
    data: usize,
    grads: usize,
    indices: usize,
}

const NO_GRAD: usize = usize::MAX;
const MAX_RANK: usize = 3;

#[derive(Clone, Copy)]
struct Shape {
    dims: [usize; MAX_RANK],
    rank: usize,
}

impl Shape {
    fn from_slice(shape: &[usize]) -> Shape {
        assert!(shape.len() <= MAX_RANK, "rank above {MAX_RANK} unsupported");
        let mut dims = [0; MAX_RANK];
        dims[..shape.len()].copy_from_slice(shape);
        Shape {
            dims,
            rank: shape.len(),
        }
    }

    fn as_slice(&self) -> &[usize] {
        &self.dims[..self.rank]
    }

    fn len(&self) -> usize {
        self.as_slice().iter().product()
    }
}

struct Node {
    shape: Shape,
    /// Value range `start..start + len` in the data arena.
    start: usize,
    len: usize,
    /// Offset into the gradient arena, or `NO_GRAD`.
    grad_start: usize,
    op: Op,
}

enum Op {
    Leaf,
    Conv1d {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    MaxPool1d {
        x: TensorId,
        /// Range in the index arena holding, for each output element, the
        /// argmax position inside the input node (tie -> earlier).
        argmax_start: usize,
    },
    Linear {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    LifMembrane {
        current: TensorId,
        u_prev: TensorId,
        s_prev: TensorId,
        beta: f64,
        theta: f64,
    },
    Spike {
        u: TensorId,
        theta: f64,
        sigma: f64,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        k: f64,
    },
    Flatten {
        x: TensorId,
    },
    SumHalves {
        x: TensorId,
    },
    SumAll {
        x: TensorId,
    },
    WeightedCe {
        counts: TensorId,
        label: usize,
        weights: [f64; 2],
    },
}

/// Recording tape for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    /// All node values, in recording order.
    data: Vec<f64>,
    /// Persistent gradients of flagged leaves.
    grads: Vec<f64>,
    /// Saved integer indices (max-pooling argmax positions).
    indices: Vec<usize>,
    /// Adjoint scratch for the backward sweep, parallel to `data`.
    adjoint: Vec<f64>,
    /// Kernel-2 convolution weights prepared per weight node (tap-major and
    /// column-major views); timestep-unrolled graphs reuse the same weight
    /// leaf every step.
    deint_cache: Vec<(usize, ConvPrep)>,
    spike_mode: SpikeMode,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Tape with hard 0/1 spikes (surrogate used only in backward).
    pub fn new() -> Self {
        Self::with_spike_mode(SpikeMode::Binary)
    }

    pub fn with_spike_mode(mode: SpikeMode) -> Self {
        Tape {
            nodes: Vec::new(),
            data: Vec::new(),
            grads: Vec::new(),
            indices: Vec::new(),
            adjoint: Vec::new(),
            deint_cache: Vec::new(),
            spike_mode: mode,
        }
    }

    /// Forgets every recorded node but keeps the allocations, so a reused
    /// tape records the next graph without touching the allocator.
    pub fn reset(&mut self) {
        self.truncate(&TapeMark {
            nodes: 0,
            data: 0,
            grads: 0,
            indices: 0,
        });
    }

    /// Position to rewind to with [`Tape::truncate`].
    pub fn mark(&self) -> TapeMark {
        TapeMark {
            nodes: self.nodes.len(),
            data: self.data.len(),
            grads: self.grads.len(),
            indices: self.indices.len(),
        }
    }

    /// Drops every node recorded after the mark, keeping earlier leaves (and
    /// their accumulated gradients) intact. Rewinding after each sample keeps
    /// the working set small while the shared parameter leaves persist.
    pub fn truncate(&mut self, mark: &TapeMark) {
        self.nodes.truncate(mark.nodes);
        self.data.truncate(mark.data);
        self.grads.truncate(mark.grads);
        self.indices.truncate(mark.indices);
        self.deint_cache.retain(|(id, _)| *id < mark.nodes);
    }

    pub fn spike_mode(&self) -> SpikeMode {
        self.spike_mode
    }

    pub fn set_spike_mode(&mut self, mode: SpikeMode) {
        self.spike_mode = mode;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push_node(&mut self, shape: Shape, start: usize, grad_start: usize, op: Op) -> TensorId {
        self.nodes.push(Node {
            shape,
            start,
            len: shape.len(),
            grad_start,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Appends an uninitialized value region and its node, returning the id;
    /// callers fill `data[start..]` right after.
    fn alloc_node(&mut self, shape: &[usize], requires_grad: bool, op: Op) -> (TensorId, usize) {
        let shape = Shape::from_slice(shape);
        let len = shape.len();
        let start = self.data.len();
        self.data.resize(start + len, 0.0);
        let grad_start = if requires_grad {
            let g = self.grads.len();
            self.grads.resize(g + len, 0.0);
            g
        } else {
            NO_GRAD
        };
        (self.push_node(shape, start, grad_start, op), start)
    }

    /// Records a leaf holding a copy of `t`. Only leaves flagged here receive
    /// persistent gradients from [`Tape::backward`].
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> TensorId {
        let (id, start) = self.alloc_node(t.shape(), requires_grad, Op::Leaf);
        self.data[start..start + t.len()].copy_from_slice(t.data());
        id
    }

    pub fn leaf_owned(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let (id, start) = self.alloc_node(&shape, requires_grad, Op::Leaf);
        self.data[start..start + data.len()].copy_from_slice(&data);
        id
    }

    /// Constant all-zero leaf (no gradient), e.g. the initial membrane state.
    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        self.alloc_node(&shape, false, Op::Leaf).0
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        let n = &self.nodes[id.0];
        &self.data[n.start..n.start + n.len]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].shape.as_slice()
    }

    /// Persistent gradient buffer of a flagged leaf, if any.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        let n = &self.nodes[id.0];
        (n.grad_start != NO_GRAD).then(|| &self.grads[n.grad_start..n.grad_start + n.len])
    }

    /// Copies a recorded tensor out of the tape, including its gradient.
    pub fn tensor(&self, id: TensorId) -> Tensor {
        let mut t = Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec())
            .expect("node consistent");
        if let Some(g) = self.grad(id) {
            t.set_grad(g.to_vec());
        }
        t
    }

    /// Resets every persistent gradient buffer to zero.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Builds the tap-deinterleaved copy of a kernel-2 convolution weight the
    /// first time it is seen; later timesteps and the backward sweep reuse it.
    fn ensure_deinterleaved(&mut self, w: TensorId, c_out: usize, c_in: usize) {
        if self.deint_cache.iter().any(|(id, _)| *id == w.0) {
            return;
        }
        let wv = self.value(w);
        let mut wd = vec![0.0; wv.len()];
        let mut wt = vec![0.0; wv.len()];
        for c in 0..c_out {
            let row = &wv[c * c_in * 2..(c + 1) * c_in * 2];
            deinterleave_k2(row, c_in, &mut wd[c * c_in * 2..(c + 1) * c_in * 2]);
            for d in 0..c_in {
                wt[d * c_out + c] = row[2 * d];
                wt[(c_in + d) * c_out + c] = row[2 * d + 1];
            }
        }
        self.deint_cache.push((w.0, ConvPrep { wd, wt }));
    }

    fn dims2(
        &self,
        id: TensorId,
        op: &'static str,
        role: &str,
    ) -> Result<(usize, usize), DiffError> {
        match self.shape(id) {
            [a, b] => Ok((*a, *b)),
            s => Err(DiffError::shape(
                op,
                format!("{role} must be 2-D, got shape {s:?}"),
            )),
        }
    }

    fn range(&self, id: TensorId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.start, n.start + n.len)
    }

    /// Valid (unpadded) stride-1 convolution of `x: [C_in, L]` with
    /// `w: [C_out, C_in, K]` and bias `b: [C_out]`, producing `[C_out, L-K+1]`.
    pub fn conv1d(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let (c_in, len) = self.dims2(x, "conv1d", "input")?;
        let (c_out, wc_in, k) = match self.shape(w) {
            [a, b, c] => (*a, *b, *c),
            s => {
                return Err(DiffError::shape(
                    "conv1d",
                    format!("weight must be 3-D [C_out, C_in, K], got shape {s:?}"),
                ))
            }
        };
        if wc_in != c_in {
            return Err(DiffError::shape(
                "conv1d",
                format!("weight channel axis is {wc_in} but input has {c_in} channels"),
            ));
        }
        if self.shape(b) != [c_out] {
            return Err(DiffError::shape(
                "conv1d",
                format!(
                    "bias axis is {:?} but weight has {c_out} output channels",
                    self.shape(b)
                ),
            ));
        }
        if len < k {
            return Err(DiffError::shape(
                "conv1d",
                format!("input length axis {len} is shorter than kernel {k}"),
            ));
        }
        if k == 2 && c_in > 1 {
            self.ensure_deinterleaved(w, c_out, c_in);
        }
        let out_len = len - k + 1;
        let (xs, xe) = self.range(x);
        let (ws, we) = self.range(w);
        let (bs, be) = self.range(b);
        let (id, start) = self.alloc_node(
            &[c_out, out_len],
            false,
            Op::Conv1d { x, w, b },
        );
        let (ro, out) = self.data.split_at_mut(start);
        conv1d_forward(
            &ro[xs..xe],
            &ro[ws..we],
            self.deint_cache
                .iter()
                .find(|(wid, _)| *wid == w.0)
                .map(|(_, prep)| prep),
            &ro[bs..be],
            c_in,
            len,
            c_out,
            k,
            out,
        );
        Ok(id)
    }

    /// Width-2, stride-2 max pooling over the length axis of `x: [C, L]`.
    /// A trailing element of odd-length inputs is dropped; ties route the
    /// gradient to the earlier index.
    pub fn maxpool1d(&mut self, x: TensorId) -> Result<TensorId, DiffError> {
        let (channels, len) = self.dims2(x, "maxpool1d", "input")?;
        if len < 2 {
            return Err(DiffError::shape(
                "maxpool1d",
                format!("length axis must be >= 2, got {len}"),
            ));
        }
        let out_len = len / 2;
        let (xs, _) = self.range(x);
        let argmax_start = self.indices.len();
        self.indices.resize(argmax_start + channels * out_len, 0);
        let (id, start) = self.alloc_node(
            &[channels, out_len],
            false,
            Op::MaxPool1d { x, argmax_start },
        );
        let (ro, out) = self.data.split_at_mut(start);
        for c in 0..channels {
            let row = &ro[xs + c * len..xs + (c + 1) * len];
            for i in 0..out_len {
                let (a, b) = (row[2 * i], row[2 * i + 1]);
                let (v, j) = if b > a { (b, 2 * i + 1) } else { (a, 2 * i) };
                out[c * out_len + i] = v;
                self.indices[argmax_start + c * out_len + i] = c * len + j;
            }
        }
        Ok(id)
    }

    /// Dense projection `w·x + b` of `x: [N]` with `w: [M, N]`, `b: [M]`.
    pub fn linear(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let n = match self.shape(x) {
            [n] => *n,
            s => {
                return Err(DiffError::shape(
                    "linear",
                    format!("input must be 1-D, got shape {s:?}"),
                ))
            }
        };
        let (m, wn) = self.dims2(w, "linear", "weight")?;
        if wn != n {
            return Err(DiffError::shape(
                "linear",
                format!("weight inner axis is {wn} but input has {n} elements"),
            ));
        }
        if self.shape(b) != [m] {
            return Err(DiffError::shape(
                "linear",
                format!("bias axis is {:?} but weight has {m} rows", self.shape(b)),
            ));
        }
        let (xs, xe) = self.range(x);
        let (ws, _) = self.range(w);
        let (bs, _) = self.range(b);
        let (id, start) = self.alloc_node(&[m], false, Op::Linear { x, w, b });
        let (ro, out) = self.data.split_at_mut(start);
        let xv = &ro[xs..xe];
        for (row, o) in out.iter_mut().enumerate() {
            *o = ro[bs + row] + dot(&ro[ws + row * n..ws + (row + 1) * n], xv);
        }
        Ok(id)
    }

    /// One leaky integrate-and-fire step.
    ///
    /// Computes `u = beta*u_prev + current - s_prev*theta`, then emits a spike
    /// where `u >= theta`. Returns `(spike, membrane)`. The membrane
    /// recurrence is differentiated exactly; only the spike indicator's
    /// derivative is replaced by the surrogate.
    pub fn lif_step(
        &mut self,
        current: TensorId,
        u_prev: TensorId,
        s_prev: TensorId,
        p: &LifParams,
    ) -> Result<(TensorId, TensorId), DiffError> {
        let shape = self.shape(current).to_vec();
        for (role, id) in [("membrane state", u_prev), ("previous spikes", s_prev)] {
            if self.shape(id) != shape {
                return Err(DiffError::shape(
                    "lif_step",
                    format!(
                        "{role} shape {:?} differs from current shape {:?}",
                        self.shape(id),
                        shape
                    ),
                ));
            }
        }
        let (cs, ce) = self.range(current);
        let (us, _) = self.range(u_prev);
        let (ss, _) = self.range(s_prev);
        let n = ce - cs;
        let (u_id, u_start) = self.alloc_node(
            &shape,
            false,
            Op::LifMembrane {
                current,
                u_prev,
                s_prev,
                beta: p.beta,
                theta: p.theta,
            },
        );
        {
            let (ro, out) = self.data.split_at_mut(u_start);
            for i in 0..n {
                out[i] = p.beta * ro[us + i] + ro[cs + i] - ro[ss + i] * p.theta;
            }
        }
        let mode = self.spike_mode;
        let (s_id, s_start) = self.alloc_node(
            &shape,
            false,
            Op::Spike {
                u: u_id,
                theta: p.theta,
                sigma: p.sigma,
            },
        );
        {
            let (ro, out) = self.data.split_at_mut(s_start);
            let uv = &ro[u_start..u_start + n];
            match mode {
                SpikeMode::Binary => {
                    for (o, &u) in out.iter_mut().zip(uv) {
                        *o = if u >= p.theta { 1.0 } else { 0.0 };
                    }
                }
                SpikeMode::Relaxed => {
                    for (o, &u) in out.iter_mut().zip(uv) {
                        *o = relaxed_spike_scalar(u, p.theta, p.sigma);
                    }
                }
            }
        }
        Ok((s_id, u_id))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(DiffError::shape(
                "add",
                format!(
                    "operand shapes {:?} and {:?} differ",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        let shape = self.shape(a).to_vec();
        let (astart, aend) = self.range(a);
        let (bstart, _) = self.range(b);
        let (id, start) = self.alloc_node(&shape, false, Op::Add { a, b });
        let (ro, out) = self.data.split_at_mut(start);
        for (i, o) in out.iter_mut().enumerate() {
            *o = ro[astart + i] + ro[bstart + i];
        }
        let _ = aend;
        Ok(id)
    }

    /// Multiplies every element by the constant `k`.
    pub fn scale(&mut self, x: TensorId, k: f64) -> TensorId {
        let shape = self.shape(x).to_vec();
        let (xs, _) = self.range(x);
        let (id, start) = self.alloc_node(&shape, false, Op::Scale { x, k });
        let (ro, out) = self.data.split_at_mut(start);
        for (i, o) in out.iter_mut().enumerate() {
            *o = k * ro[xs + i];
        }
        id
    }

    /// Reshapes to rank 1 without touching the data.
    pub fn flatten(&mut self, x: TensorId) -> TensorId {
        let len = self.nodes[x.0].len;
        let (xs, _) = self.range(x);
        let (id, start) = self.alloc_node(&[len], false, Op::Flatten { x });
        let (ro, out) = self.data.split_at_mut(start);
        out.copy_from_slice(&ro[xs..xs + len]);
        id
    }

    /// Sums the two halves of an even-length vector into a `[2]` tensor:
    /// entry 0 over indices `0..P/2`, entry 1 over `P/2..P`.
    pub fn sum_halves(&mut self, x: TensorId) -> Result<TensorId, DiffError> {
        let p = match self.shape(x) {
            [p] if p % 2 == 0 && *p > 0 => *p,
            s => {
                return Err(DiffError::shape(
                    "sum_halves",
                    format!("input must be 1-D with even length, got shape {s:?}"),
                ))
            }
        };
        let half = p / 2;
        let (xs, _) = self.range(x);
        let (id, start) = self.alloc_node(&[2], false, Op::SumHalves { x });
        let (ro, out) = self.data.split_at_mut(start);
        out[0] = ro[xs..xs + half].iter().sum();
        out[1] = ro[xs + half..xs + p].iter().sum();
        Ok(id)
    }

    /// Sums every element into a scalar.
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let (xs, xe) = self.range(x);
        let (id, start) = self.alloc_node(&[], false, Op::SumAll { x });
        let (ro, out) = self.data.split_at_mut(start);
        out[0] = ro[xs..xe].iter().sum();
        id
    }

    /// Weighted cross-entropy over a `[2]` vector of per-class spike counts:
    /// `loss = weights[label] * (-log softmax(counts)[label])`.
    pub fn weighted_ce(
        &mut self,
        counts: TensorId,
        label: usize,
        weights: [f64; 2],
    ) -> Result<TensorId, DiffError> {
        if self.shape(counts) != [2] {
            return Err(DiffError::shape(
                "weighted_ce",
                format!("counts must have shape [2], got {:?}", self.shape(counts)),
            ));
        }
        if label > 1 {
            return Err(DiffError::InvalidParameter(format!(
                "class label must be 0 or 1, got {label}"
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0)) {
            return Err(DiffError::InvalidParameter(format!(
                "class weights must be positive, got {weights:?}"
            )));
        }
        let (cs, _) = self.range(counts);
        let (id, start) = self.alloc_node(
            &[],
            false,
            Op::WeightedCe {
                counts,
                label,
                weights,
            },
        );
        let (ro, out) = self.data.split_at_mut(start);
        let (c0, c1) = (ro[cs], ro[cs + 1]);
        let m = c0.max(c1);
        let log_sum = m + ((c0 - m).exp() + (c1 - m).exp()).ln();
        out[0] = weights[label] * (log_sum - [c0, c1][label]);
        Ok(id)
    }

    /// Reverse sweep from `seed`, which must be a scalar on this tape.
    ///
    /// Adjoints are propagated through every recorded operation; gradients
    /// accumulate into the persistent buffers of flagged leaves, adding onto
    /// whatever they already hold.
    pub fn backward(&mut self, seed: TensorId) -> Result<(), DiffError> {
        if self.nodes.is_empty() {
            return Ok(());
        }
        if self.nodes[seed.0].len != 1 {
            return Err(DiffError::shape(
                "backward",
                format!("seed must be scalar, got shape {:?}", self.shape(seed)),
            ));
        }
        let seed_node = &self.nodes[seed.0];
        let live = seed_node.start + seed_node.len;
        self.adjoint.clear();
        self.adjoint.resize(live, 0.0);
        self.adjoint[seed_node.start] = 1.0;

        for i in (0..=seed.0).rev() {
            let (start, len) = {
                let n = &self.nodes[i];
                (n.start, n.len)
            };
            // Inputs precede this node, so their adjoint slots all sit below
            // `start`; split once and hand the node's own adjoint out as a
            // read-only slice.
            let (writable, upper) = self.adjoint.split_at_mut(start);
            let go: &[f64] = &upper[..len];

            match self.nodes[i].op {
                Op::Leaf => {
                    let g = self.nodes[i].grad_start;
                    if g != NO_GRAD {
                        for (dst, src) in self.grads[g..g + len].iter_mut().zip(go) {
                            *dst += src;
                        }
                    }
                }
                Op::Conv1d { x, w, b } => {
                    let (c_in, xlen) = (self.nodes[x.0].shape.dims[0], self.nodes[x.0].shape.dims[1]);
                    let (c_out, k) = (self.nodes[w.0].shape.dims[0], self.nodes[w.0].shape.dims[2]);
                    let out_len = xlen - k + 1;
                    let (xs, xe) = node_range(&self.nodes, x);
                    let (ws, we) = node_range(&self.nodes, w);
                    let (bs, _) = node_range(&self.nodes, b);
                    let wd_all = self
                        .deint_cache
                        .iter()
                        .find(|(id, _)| *id == w.0)
                        .map(|(_, prep)| prep.wd.as_slice());
                    conv1d_backward_x(
                        go,
                        &self.data[ws..we],
                        wd_all,
                        c_in,
                        xlen,
                        c_out,
                        k,
                        &mut writable[xs..xe],
                    );
                    conv1d_backward_w(
                        go,
                        &self.data[xs..xe],
                        c_in,
                        xlen,
                        c_out,
                        k,
                        &mut writable[ws..we],
                    );
                    for c in 0..c_out {
                        let s: f64 = go[c * out_len..(c + 1) * out_len].iter().sum();
                        writable[bs + c] += s;
                    }
                }
                Op::MaxPool1d { x, argmax_start } => {
                    let (xs, _) = node_range(&self.nodes, x);
                    for (j, goi) in go.iter().enumerate() {
                        let src = self.indices[argmax_start + j];
                        writable[xs + src] += goi;
                    }
                }
                Op::Linear { x, w, b } => {
                    let n = self.nodes[x.0].shape.dims[0];
                    let m = self.nodes[w.0].shape.dims[0];
                    let (xs, xe) = node_range(&self.nodes, x);
                    let (ws, _) = node_range(&self.nodes, w);
                    let (bs, _) = node_range(&self.nodes, b);
                    for row in 0..m {
                        let goi = go[row];
                        if goi == 0.0 {
                            continue;
                        }
                        let wrow_start = ws + row * n;
                        axpy(
                            &mut writable[xs..xe],
                            goi,
                            &self.data[wrow_start..wrow_start + n],
                        );
                        axpy(
                            &mut writable[wrow_start..wrow_start + n],
                            goi,
                            &self.data[xs..xe],
                        );
                        writable[bs + row] += goi;
                    }
                }
                Op::LifMembrane {
                    current,
                    u_prev,
                    s_prev,
                    beta,
                    theta,
                } => {
                    let (cs, _) = node_range(&self.nodes, current);
                    let (us, _) = node_range(&self.nodes, u_prev);
                    let (ss, _) = node_range(&self.nodes, s_prev);
                    for (j, goi) in go.iter().enumerate() {
                        writable[cs + j] += goi;
                    }
                    for (j, goi) in go.iter().enumerate() {
                        writable[us + j] += beta * goi;
                    }
                    for (j, goi) in go.iter().enumerate() {
                        writable[ss + j] -= theta * goi;
                    }
                }
                Op::Spike { u, theta, sigma } => {
                    let (us, _) = node_range(&self.nodes, u);
                    for (j, goi) in go.iter().enumerate() {
                        let uj = self.data[us + j];
                        writable[us + j] += goi * surrogate_grad_scalar(uj, theta, sigma);
                    }
                }
                Op::Add { a, b } => {
                    let (astart, _) = node_range(&self.nodes, a);
                    let (bstart, _) = node_range(&self.nodes, b);
                    for (j, goi) in go.iter().enumerate() {
                        writable[astart + j] += goi;
                    }
                    for (j, goi) in go.iter().enumerate() {
                        writable[bstart + j] += goi;
                    }
                }
                Op::Scale { x, k } => {
                    let (xs, _) = node_range(&self.nodes, x);
                    for (j, goi) in go.iter().enumerate() {
                        writable[xs + j] += k * goi;
                    }
                }
                Op::Flatten { x } => {
                    let (xs, _) = node_range(&self.nodes, x);
                    for (j, goi) in go.iter().enumerate() {
                        writable[xs + j] += goi;
                    }
                }
                Op::SumHalves { x } => {
                    let half = self.nodes[x.0].len / 2;
                    let (xs, xe) = node_range(&self.nodes, x);
                    let (g0, g1) = (go[0], go[1]);
                    for slot in &mut writable[xs..xs + half] {
                        *slot += g0;
                    }
                    for slot in &mut writable[xs + half..xe] {
                        *slot += g1;
                    }
                }
                Op::SumAll { x } => {
                    let (xs, xe) = node_range(&self.nodes, x);
                    let g = go[0];
                    for slot in &mut writable[xs..xe] {
                        *slot += g;
                    }
                }
                Op::WeightedCe {
                    counts,
                    label,
                    weights,
                } => {
                    let (cs, _) = node_range(&self.nodes, counts);
                    let (c0, c1) = (self.data[cs], self.data[cs + 1]);
                    let m = c0.max(c1);
                    let (e0, e1) = ((c0 - m).exp(), (c1 - m).exp());
                    let z = e0 + e1;
                    let w = weights[label];
                    let go0 = go[0];
                    for (j, pj) in [e0 / z, e1 / z].into_iter().enumerate() {
                        let indicator = if j == label { 1.0 } else { 0.0 };
                        writable[cs + j] += go0 * w * (pj - indicator);
                    }
                }
            }
        }
        Ok(())
    }
}

fn node_range(nodes: &[Node], id: TensorId) -> (usize, usize) {
    let n = &nodes[id.0];
    (n.start, n.start + n.len)
}

/// `a.mul_add(b, c)` where hardware FMA is compiled in; plain multiply-add
/// otherwise (the libm `fma` fallback would be far slower than it is worth).
#[inline(always)]
fn fmadd(a: f64, b: f64, c: f64) -> f64 {
    #[cfg(target_feature = "fma")]
    {
        a.mul_add(b, c)
    }
    #[cfg(not(target_feature = "fma"))]
    {
        a * b + c
    }
}

/// Dot product with four independent accumulator lanes; the fixed summation
/// order keeps results identical across call sites and runs.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    for (ca, cb) in a.chunks_exact(4).zip(b.chunks_exact(4)) {
        acc[0] = fmadd(ca[0], cb[0], acc[0]);
        acc[1] = fmadd(ca[1], cb[1], acc[1]);
        acc[2] = fmadd(ca[2], cb[2], acc[2]);
        acc[3] = fmadd(ca[3], cb[3], acc[3]);
    }
    let mut tail = 0.0;
    let ra = a.chunks_exact(4).remainder();
    let rb = b.chunks_exact(4).remainder();
    for (ai, bi) in ra.iter().zip(rb) {
        tail = fmadd(*ai, *bi, tail);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(y: &mut [f64], k: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = fmadd(k, *xi, *yi);
    }
}

/// Input transposed to length-major order: `zt[i * c_in + d] = x[d * len + i]`.
/// Rows `i` and `i + 1` then sit adjacent, so a kernel-2 convolution at
/// position `i` is one contiguous dot of length `2 * c_in`.
fn transpose_len_major(x: &[f64], c_in: usize, len: usize) -> Vec<f64> {
    let mut zt = vec![0.0; len * c_in];
    for d in 0..c_in {
        let xrow = &x[d * len..(d + 1) * len];
        for (i, v) in xrow.iter().enumerate() {
            zt[i * c_in + d] = *v;
        }
    }
    zt
}

/// Weight row for one output channel, deinterleaved by tap:
/// `wd[kk * c_in + d] = w[(c * c_in + d) * 2 + kk]`.
fn deinterleave_k2(wrow: &[f64], c_in: usize, wd: &mut [f64]) {
    for d in 0..c_in {
        wd[d] = wrow[2 * d];
        wd[c_in + d] = wrow[2 * d + 1];
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    prep: Option<&ConvPrep>,
    b: &[f64],
    c_in: usize,
    len: usize,
    c_out: usize,
    k: usize,
    y: &mut [f64],
) {
    let out_len = len - k + 1;
    if k == 2 && c_in > 1 {
        // Column accumulation: only active (mostly binary spike) inputs
        // contribute their weight column, so silent channels cost nothing.
        let wt = &prep.expect("prepared weights").wt;
        let zt = transpose_len_major(x, c_in, len);
        let mut ybuf = vec![0.0; c_out];
        for i in 0..out_len {
            ybuf.copy_from_slice(b);
            let zwin = &zt[i * c_in..(i + 2) * c_in];
            for (j, &v) in zwin.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                let col = &wt[j * c_out..(j + 1) * c_out];
                if v == 1.0 {
                    for (yi, wi) in ybuf.iter_mut().zip(col) {
                        *yi += wi;
                    }
                } else {
                    axpy(&mut ybuf, v, col);
                }
            }
            for (c, &yv) in ybuf.iter().enumerate() {
                y[c * out_len + i] = yv;
            }
        }
        return;
    }
    for c in 0..c_out {
        let yrow = &mut y[c * out_len..(c + 1) * out_len];
        yrow.iter_mut().for_each(|v| *v = b[c]);
        for d in 0..c_in {
            let xrow = &x[d * len..(d + 1) * len];
            for kk in 0..k {
                let wv = w[(c * c_in + d) * k + kk];
                if wv == 0.0 {
                    continue;
                }
                axpy(yrow, wv, &xrow[kk..kk + out_len]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_backward_x(
    go: &[f64],
    w: &[f64],
    wd_all: Option<&[f64]>,
    c_in: usize,
    len: usize,
    c_out: usize,
    k: usize,
    dx: &mut [f64],
) {
    let out_len = len - k + 1;
    if k == 2 && c_in > 1 {
        let wd_all = wd_all.expect("deinterleaved weights prepared");
        let mut dzt = vec![0.0; len * c_in];
        for c in 0..c_out {
            let wd = &wd_all[c * c_in * 2..(c + 1) * c_in * 2];
            let grow = &go[c * out_len..(c + 1) * out_len];
            for (i, gi) in grow.iter().enumerate() {
                if *gi != 0.0 {
                    axpy(&mut dzt[i * c_in..(i + 2) * c_in], *gi, wd);
                }
            }
        }
        for d in 0..c_in {
            let dxrow = &mut dx[d * len..(d + 1) * len];
            for (i, dv) in dxrow.iter_mut().enumerate() {
                *dv += dzt[i * c_in + d];
            }
        }
        return;
    }
    for c in 0..c_out {
        let grow = &go[c * out_len..(c + 1) * out_len];
        for d in 0..c_in {
            let dxrow = &mut dx[d * len..(d + 1) * len];
            for kk in 0..k {
                let wv = w[(c * c_in + d) * k + kk];
                if wv == 0.0 {
                    continue;
                }
                axpy(&mut dxrow[kk..kk + out_len], wv, grow);
            }
        }
    }
}

fn conv1d_backward_w(
    go: &[f64],
    x: &[f64],
    c_in: usize,
    len: usize,
    c_out: usize,
    k: usize,
    dw: &mut [f64],
) {
    let out_len = len - k + 1;
    if k == 2 && c_in > 1 {
        let zt = transpose_len_major(x, c_in, len);
        let mut dwd = vec![0.0; 2 * c_in];
        for c in 0..c_out {
            dwd.iter_mut().for_each(|v| *v = 0.0);
            let grow = &go[c * out_len..(c + 1) * out_len];
            for (i, gi) in grow.iter().enumerate() {
                if *gi != 0.0 {
                    axpy(&mut dwd, *gi, &zt[i * c_in..(i + 2) * c_in]);
                }
            }
            let dwrow = &mut dw[c * c_in * 2..(c + 1) * c_in * 2];
            for d in 0..c_in {
                dwrow[2 * d] += dwd[d];
                dwrow[2 * d + 1] += dwd[c_in + d];
            }
        }
        return;
    }
    for c in 0..c_out {
        let grow = &go[c * out_len..(c + 1) * out_len];
        for d in 0..c_in {
            let xrow = &x[d * len..(d + 1) * len];
            for kk in 0..k {
                dw[(c * c_in + d) * k + kk] += dot(grow, &xrow[kk..kk + out_len]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> TensorId {
        tape.leaf_owned(shape, data, true)
    }

    #[test]
    fn conv1d_direct_arithmetic() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3], vec![1.0, 2.0, 4.0]);
        let w = leaf(&mut tape, vec![1, 1, 2], vec![1.0, -1.0]);
        let b = leaf(&mut tape, vec![1], vec![0.0]);
        let y = tape.conv1d(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[-1.0, -2.0]);
        assert_eq!(tape.shape(y), &[1, 2]);
    }

    #[test]
    fn conv1d_zero_input() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 3], vec![0.0; 3]);
        let w = leaf(&mut tape, vec![1, 1, 2], vec![0.7, -2.3]);
        let b = leaf(&mut tape, vec![1], vec![0.0]);
        let y = tape.conv1d(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[0.0, 0.0]);
    }

    #[test]
    fn conv1d_fast_and_generic_paths_agree() {
        // Multi-channel kernel-2 (fast path) vs a hand-rolled direct sum.
        let c_in = 3;
        let len = 6;
        let c_out = 4;
        let x: Vec<f64> = (0..c_in * len).map(|i| (i as f64 * 0.7).sin()).collect();
        let w: Vec<f64> = (0..c_out * c_in * 2).map(|i| (i as f64 * 0.3).cos()).collect();
        let b: Vec<f64> = (0..c_out).map(|i| i as f64 * 0.1).collect();
        let mut tape = Tape::new();
        let xi = leaf(&mut tape, vec![c_in, len], x.clone());
        let wi = leaf(&mut tape, vec![c_out, c_in, 2], w.clone());
        let bi = leaf(&mut tape, vec![c_out], b.clone());
        let y = tape.conv1d(xi, wi, bi).unwrap();
        let out_len = len - 1;
        for c in 0..c_out {
            for i in 0..out_len {
                let mut want = b[c];
                for d in 0..c_in {
                    for kk in 0..2 {
                        want += w[(c * c_in + d) * 2 + kk] * x[d * len + i + kk];
                    }
                }
                let got = tape.value(y)[c * out_len + i];
                assert!((got - want).abs() < 1e-12, "c={c} i={i}");
            }
        }
    }

    #[test]
    fn conv1d_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 4], vec![0.0; 8]);
        let w = leaf(&mut tape, vec![3, 1, 2], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![3], vec![0.0; 3]);
        let err = tape.conv1d(x, w, b).unwrap_err();
        assert!(err.to_string().contains("channel"), "{err}");
    }

    #[test]
    fn maxpool_examples() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 4], vec![3.0, 1.0, 2.0, 5.0]);
        let y = tape.maxpool1d(x).unwrap();
        assert_eq!(tape.value(y), &[3.0, 5.0]);

        // Odd length: trailing element dropped.
        let x2 = leaf(&mut tape, vec![1, 3], vec![7.0, 2.0, 9.0]);
        let y2 = tape.maxpool1d(x2).unwrap();
        assert_eq!(tape.value(y2), &[7.0]);

        let short = leaf(&mut tape, vec![1, 1], vec![1.0]);
        assert!(tape.maxpool1d(short).is_err());
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_earlier_index() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![1.0, 1.0]);
        let y = tape.maxpool1d(x).unwrap();
        assert_eq!(tape.value(y), &[1.0]);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 0.0]);
        let w = leaf(&mut tape, vec![1, 2], vec![2.0, 3.0]);
        let b = leaf(&mut tape, vec![1], vec![1.0]);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y), &[3.0]);

        // Zero input passes the bias through.
        let x0 = leaf(&mut tape, vec![2], vec![0.0, 0.0]);
        let y0 = tape.linear(x0, w, b).unwrap();
        assert_eq!(tape.value(y0), &[1.0]);

        let w_bad = leaf(&mut tape, vec![1, 3], vec![0.0; 3]);
        assert!(tape.linear(x, w_bad, b).is_err());
    }

    #[test]
    fn lif_step_below_threshold() {
        let mut tape = Tape::new();
        let p = LifParams::new(0.9, 1.0, 10.0).unwrap();
        let i = leaf(&mut tape, vec![1], vec![0.2]);
        let u0 = leaf(&mut tape, vec![1], vec![0.5]);
        let s0 = leaf(&mut tape, vec![1], vec![0.0]);
        let (s, u) = tape.lif_step(i, u0, s0, &p).unwrap();
        assert!((tape.value(u)[0] - 0.65).abs() < 1e-12);
        assert_eq!(tape.value(s), &[0.0]);
    }

    #[test]
    fn lif_step_crossing() {
        let mut tape = Tape::new();
        let p = LifParams::new(0.9, 1.0, 10.0).unwrap();
        let i = leaf(&mut tape, vec![1], vec![0.6]);
        let u0 = leaf(&mut tape, vec![1], vec![0.5]);
        let s0 = leaf(&mut tape, vec![1], vec![0.0]);
        let (s, u) = tape.lif_step(i, u0, s0, &p).unwrap();
        assert!((tape.value(u)[0] - 1.05).abs() < 1e-12);
        assert_eq!(tape.value(s), &[1.0]);
    }

    #[test]
    fn lif_step_subtractive_reset() {
        let mut tape = Tape::new();
        let p = LifParams::new(0.9, 1.0, 10.0).unwrap();
        let i = leaf(&mut tape, vec![1], vec![0.0]);
        let u0 = leaf(&mut tape, vec![1], vec![1.0]);
        let s0 = leaf(&mut tape, vec![1], vec![1.0]);
        let (s, u) = tape.lif_step(i, u0, s0, &p).unwrap();
        assert!((tape.value(u)[0] - (-0.1)).abs() < 1e-12);
        assert_eq!(tape.value(s), &[0.0]);
    }

    #[test]
    fn surrogate_confinement_on_two_step_chain() {
        // One neuron unrolled two steps; the u -> u path must carry exactly
        // beta while the spike path carries the surrogate.
        let p = LifParams::new(0.9, 1.0, 10.0).unwrap();
        let mut tape = Tape::new();
        let i1 = leaf(&mut tape, vec![1], vec![1.2]);
        let i2 = leaf(&mut tape, vec![1], vec![0.3]);
        let u0 = tape.zeros(vec![1]);
        let s0 = tape.zeros(vec![1]);
        let (s1, u1) = tape.lif_step(i1, u0, s0, &p).unwrap();
        let (_s2, u2) = tape.lif_step(i2, u1, s1, &p).unwrap();
        let seed = tape.sum_all(u2);
        tape.backward(seed).unwrap();

        // u1 = 1.2 (spike), so d u2/d i1 = beta - theta * g(u1) with
        // g(u1) = 1/(1 + 10*0.2)^2 = 1/9.
        let expected = p.beta - p.theta / 9.0;
        let got = tape.grad(i1).unwrap()[0];
        assert!((got - expected).abs() < 1e-12, "got {got}, want {expected}");
        // d u2/d i2 = 1 exactly.
        assert_eq!(tape.grad(i2).unwrap(), &[1.0]);
    }

    #[test]
    fn weighted_ce_symmetric_counts() {
        let mut tape = Tape::new();
        for c in [0.0, 3.0, 41.5] {
            let counts = leaf(&mut tape, vec![2], vec![c, c]);
            let loss = tape.weighted_ce(counts, 0, [1.0, 1.0]).unwrap();
            assert!((tape.value(loss)[0] - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_ce_weight_scaling() {
        let mut tape = Tape::new();
        let counts = leaf(&mut tape, vec![2], vec![0.0, 0.0]);
        let loss = tape.weighted_ce(counts, 1, [1.0, 9.0]).unwrap();
        assert!((tape.value(loss)[0] - 9.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn weighted_ce_rejects_bad_inputs() {
        let mut tape = Tape::new();
        let counts = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(tape.weighted_ce(counts, 2, [1.0, 1.0]).is_err());
        assert!(tape.weighted_ce(counts, 0, [0.0, 1.0]).is_err());
        let wide = leaf(&mut tape, vec![3], vec![0.0; 3]);
        assert!(tape.weighted_ce(wide, 0, [1.0, 1.0]).is_err());
    }

    #[test]
    fn backward_scale_chain() {
        // y = 2x at x = 3 -> dy/dx = 2
        let mut tape = Tape::new();
        let x = tape.leaf_owned(Vec::new(), vec![3.0], true);
        let y = tape.scale(x, 2.0);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
        assert_eq!(tape.value(y), &[6.0]);
    }

    #[test]
    fn backward_fan_out_accumulates() {
        // y = x + x -> dy/dx = 2
        let mut tape = Tape::new();
        let x = tape.leaf_owned(Vec::new(), vec![3.0], true);
        let y = tape.add(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(Vec::new(), vec![1.5], true);
        let y = tape.scale(x, 4.0);
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[8.0]);
        tape.zero_grad();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn backward_empty_tape_is_noop() {
        let mut tape = Tape::new();
        assert!(tape.backward(TensorId(0)).is_ok());
    }

    #[test]
    fn backward_rejects_non_scalar_seed() {
        let mut tape = Tape::new();
        let x = tape.leaf_owned(vec![2], vec![1.0, 2.0], true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn reset_recycles_the_tape() {
        let mut tape = Tape::new();
        let run = |tape: &mut Tape| {
            tape.reset();
            let x = tape.leaf_owned(vec![2, 5], (0..10).map(|i| (i as f64).sin()).collect(), true);
            let w =
                tape.leaf_owned(vec![3, 2, 2], (0..12).map(|i| (i as f64).cos()).collect(), true);
            let b = tape.leaf_owned(vec![3], vec![0.1, -0.2, 0.3], true);
            let y = tape.conv1d(x, w, b).unwrap();
            let pooled = tape.maxpool1d(y).unwrap();
            let seed = tape.sum_all(pooled);
            tape.backward(seed).unwrap();
            (tape.value(pooled).to_vec(), tape.grad(w).unwrap().to_vec())
        };
        let first = run(&mut tape);
        let second = run(&mut tape);
        assert_eq!(first, second);
        assert_eq!(first, run(&mut Tape::new()));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf_owned(vec![2, 5], (0..10).map(|i| (i as f64).sin()).collect(), true);
            let w =
                tape.leaf_owned(vec![3, 2, 2], (0..12).map(|i| (i as f64).cos()).collect(), true);
            let b = tape.leaf_owned(vec![3], vec![0.1, -0.2, 0.3], true);
            let y = tape.conv1d(x, w, b).unwrap();
            let pooled = tape.maxpool1d(y).unwrap();
            let flat = tape.flatten(pooled);
            tape.value(flat).to_vec()
        };
        assert_eq!(run(), run());
    }
}
