//! CPU interpreter for [`LayerGraph`]s: batched forward passes in inference
//! and training mode, reverse-mode gradients, and the weight checkpoint file.
//!
//! Activations are stored row-major as `[channels][batch][points]` for board
//! planes and `[features][batch]` for vectors, so 1x1 convolutions and dense
//! layers are single matrix products.

use std::fmt::Debug;
use std::fs;
use std::path::Path;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use thiserror::Error;

use crate::encoder::FeatureTensor;
use crate::netspec::{build_graph, LayerGraph, NetworkSpec, Op, SpecError};

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-3;
/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 22;
/// Live activation elements per inference block.
pub const INFER_BLOCK_BUDGET: usize = 1 << 17;

pub trait Scalar: Float + FromPrimitive + Default + Send + Sync + Debug + 'static {
    /// C = alpha A B + beta C with arbitrary element strides.
    ///
    /// # Safety
    /// Every addressed element must lie inside the corresponding buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

fn cst<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("representable")
}

/// Strided matrix view: `data[offset + i * rs + j * cs]`.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    offset: usize,
    rs: usize,
    cs: usize,
}

fn view<T>(data: &[T], offset: usize, rs: usize, cs: usize) -> View<'_, T> {
    View { data, offset, rs, cs }
}

/// C[m x n] (+)= A[m x k] B[k x n]. C has row stride `rsc` and unit column stride.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: View<T>, b: View<T>, accumulate: bool, c: &mut [T], c_offset: usize, rsc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |v: &View<T>, r: usize, cc: usize| v.offset + (r - 1) * v.rs + (cc - 1) * v.cs;
    assert!(k == 0 || last(&a, m, k) < a.data.len(), "gemm: A out of bounds");
    assert!(k == 0 || last(&b, k, n) < b.data.len(), "gemm: B out of bounds");
    assert!(c_offset + (m - 1) * rsc + n - 1 < c.len(), "gemm: C out of bounds");
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds asserted above for all addressed elements.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_offset),
            rsc as isize,
            1,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    DepthwiseWeight,
    DenseWeight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    const ALL: [ParamKind; 8] = [
        ParamKind::ConvWeight,
        ParamKind::DepthwiseWeight,
        ParamKind::DenseWeight,
        ParamKind::Bias,
        ParamKind::Gamma,
        ParamKind::Beta,
        ParamKind::RunningMean,
        ParamKind::RunningVar,
    ];

    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Subject to L2 regularization.
    pub fn decayed(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::DepthwiseWeight | ParamKind::DenseWeight)
    }

    fn code(self) -> u8 {
        ParamKind::ALL.iter().position(|&k| k == self).unwrap() as u8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub kind: ParamKind,
    pub data: Vec<T>,
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("input has {found} values, expected {expected}")]
    Shape { expected: usize, found: usize },
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error at byte {offset}: {what}")]
    Format { offset: usize, what: String },
}

/// A built graph with its weights.
#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    spec: NetworkSpec,
    graph: LayerGraph,
    params: Vec<Param<T>>,
    /// Parameter indices owned by each layer, in layer order.
    slots: Vec<Vec<usize>>,
}

/// Per-sample outputs, row-major over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Output<T> {
    pub batch: usize,
    /// `[batch][points]` move probabilities.
    pub policy: Vec<T>,
    /// `[batch][points]` pre-softmax scores.
    pub policy_logits: Vec<T>,
    /// Probability that White wins.
    pub value: Vec<T>,
    pub value_logits: Vec<T>,
}

/// Activations retained by a training-mode forward pass.
pub struct Tape<T> {
    batch: usize,
    acts: Vec<Vec<T>>,
    /// Batch mean and inverse standard deviation per batch-norm layer.
    stats: Vec<Option<(Vec<T>, Vec<T>)>>,
    pub output: Output<T>,
}

/// Packs encoded positions into the `[planes][batch][points]` input layout.
pub fn pack_inputs<T: Scalar>(tensors: &[&FeatureTensor]) -> Vec<T> {
    let b = tensors.len();
    if b == 0 {
        return Vec::new();
    }
    let s = tensors[0].size() * tensors[0].size();
    let planes = tensors[0].planes();
    let mut out = vec![T::zero(); planes * b * s];
    for (i, t) in tensors.iter().enumerate() {
        let raw = t.as_slice();
        for p in 0..planes {
            let dst = &mut out[(p * b + i) * s..(p * b + i + 1) * s];
            for (d, &v) in dst.iter_mut().zip(&raw[p * s..(p + 1) * s]) {
                if v != 0 {
                    *d = T::one();
                }
            }
        }
    }
    out
}

impl<T: Scalar> Network<T> {
    /// Builds the graph with fan-in scaled uniform weights and identity batch norm.
    pub fn new<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Result<Network<T>, NnError> {
        let graph = build_graph(spec)?;
        let mut params = Vec::new();
        let mut slots = Vec::with_capacity(graph.layers.len());
        let mut uniform = |n: usize, fan_in: usize| -> Vec<T> {
            let limit = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| cst(rng.gen_range(-limit..limit))).collect()
        };
        for layer in &graph.layers {
            let mut own = Vec::new();
            let mut add = |kind, data| {
                own.push(params.len());
                params.push(Param { kind, data });
            };
            match layer.op {
                Op::Conv { kernel, cin, cout, bias } => {
                    let fan = kernel * kernel * cin;
                    add(ParamKind::ConvWeight, uniform(fan * cout, fan));
                    if bias {
                        add(ParamKind::Bias, vec![T::zero(); cout]);
                    }
                }
                Op::Depthwise { kernel, channels } => {
                    add(ParamKind::DepthwiseWeight, uniform(kernel * kernel * channels, kernel * kernel));
                }
                Op::BatchNorm { channels } => {
                    add(ParamKind::Gamma, vec![T::one(); channels]);
                    add(ParamKind::Beta, vec![T::zero(); channels]);
                    add(ParamKind::RunningMean, vec![T::zero(); channels]);
                    add(ParamKind::RunningVar, vec![T::one(); channels]);
                }
                Op::Dense { inputs, outputs, bias } => {
                    add(ParamKind::DenseWeight, uniform(inputs * outputs, inputs));
                    if bias {
                        add(ParamKind::Bias, vec![T::zero(); outputs]);
                    }
                }
                _ => {}
            }
            slots.push(own);
        }
        Ok(Network {
            spec: spec.clone(),
            graph,
            params,
            slots,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn graph(&self) -> &LayerGraph {
        &self.graph
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Zeroes the layers producing the policy and value scores, giving a
    /// uniform policy and a value of one half for every input.
    pub fn zero_output_layers(&mut self) {
        for out in [self.graph.policy, self.graph.value] {
            // Walk back from the output to the nearest parametrized layer.
            let mut i = out;
            while self.slots[i].is_empty() {
                i = self.graph.layers[i].inputs[0];
            }
            for &p in &self.slots[i] {
                self.params[p].data.iter_mut().for_each(|x| *x = T::zero());
            }
        }
    }

    /// Converts every weight to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            graph: self.graph.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    kind: p.kind,
                    data: p.data.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect(),
                })
                .collect(),
            slots: self.slots.clone(),
        }
    }

    fn points(&self) -> usize {
        self.graph.points
    }

    fn input_len(&self, batch: usize) -> usize {
        self.spec.input_planes * batch * self.points()
    }

    fn check_input(&self, input: &[T], batch: usize) -> Result<(), NnError> {
        let expected = self.input_len(batch);
        if batch == 0 || input.len() != expected {
            return Err(NnError::Shape { expected, found: input.len() });
        }
        Ok(())
    }

    /// Inference-mode forward pass using batch-norm running statistics.
    ///
    /// Samples are independent in inference mode, so large batches run in
    /// blocks of [`Network::infer_block_size`] samples to keep activations
    /// cache resident. Outputs are identical to a single whole-batch pass.
    pub fn infer(&self, input: &[T], batch: usize) -> Result<Output<T>, NnError> {
        self.check_input(input, batch)?;
        let block = self.infer_block_size();
        if batch <= block {
            return Ok(self.infer_unchecked(input.to_vec(), batch));
        }
        let s = self.points();
        let mut out = Output {
            batch,
            policy: Vec::with_capacity(batch * s),
            policy_logits: Vec::with_capacity(batch * s),
            value: Vec::with_capacity(batch),
            value_logits: Vec::with_capacity(batch),
        };
        for b0 in (0..batch).step_by(block) {
            let nb = block.min(batch - b0);
            let mut sub = Vec::with_capacity(self.input_len(nb));
            for plane in input.chunks_exact(batch * s) {
                sub.extend_from_slice(&plane[b0 * s..(b0 + nb) * s]);
            }
            let o = self.infer_unchecked(sub, nb);
            out.policy.extend_from_slice(&o.policy);
            out.policy_logits.extend_from_slice(&o.policy_logits);
            out.value.extend_from_slice(&o.value);
            out.value_logits.extend_from_slice(&o.value_logits);
        }
        Ok(out)
    }

    /// Samples per inference block: the most whose live activations fit
    /// [`INFER_BLOCK_BUDGET`] elements, at least one.
    pub fn infer_block_size(&self) -> usize {
        (INFER_BLOCK_BUDGET / self.live_peak(1).max(1)).max(1)
    }

    fn last_use(&self) -> Vec<usize> {
        let n = self.graph.layers.len();
        let mut last_use = vec![0usize; n];
        for (i, l) in self.graph.layers.iter().enumerate() {
            for &j in &l.inputs {
                last_use[j] = i;
            }
        }
        // Head outputs and their logits survive to `collect_output`.
        for k in [self.graph.policy, self.graph.value] {
            last_use[k] = n;
            last_use[self.graph.layers[k].inputs[0]] = n;
        }
        last_use
    }

    fn infer_unchecked(&self, input: Vec<T>, batch: usize) -> Output<T> {
        let n = self.graph.layers.len();
        let last_use = self.last_use();
        let mut acts: Vec<Vec<T>> = vec![Vec::new(); n];
        acts[0] = input;
        for i in 1..n {
            acts[i] = self.layer_forward(i, &acts, batch, None);
            for &j in &self.graph.layers[i].inputs {
                if last_use[j] == i {
                    acts[j] = Vec::new();
                }
            }
        }
        self.collect_output(&acts, batch)
    }

    /// Peak live activation elements of one unblocked pass over `batch`.
    fn live_peak(&self, batch: usize) -> usize {
        let size = |i: usize| {
            let sh = self.graph.layers[i].shape;
            sh.channels * batch * if sh.spatial { self.points() } else { 1 }
        };
        let last_use = self.last_use();
        let mut live = self.input_len(batch);
        let mut peak = live;
        for i in 1..self.graph.layers.len() {
            live += size(i);
            peak = peak.max(live);
            for &j in &self.graph.layers[i].inputs {
                if last_use[j] == i {
                    live -= if j == 0 { self.input_len(batch) } else { size(j) };
                }
            }
        }
        peak
    }

    /// Peak bytes allocated by `infer` beyond the caller's input: block
    /// activations, the block input copy, the im2col scratch buffer and the
    /// assembled output.
    pub fn infer_peak_bytes(&self, batch: usize) -> usize {
        let nb = batch.min(self.infer_block_size());
        let gathered = if batch > nb { self.input_len(nb) } else { 0 };
        let output = batch * 2 * (self.points() + 1);
        (self.live_peak(nb) + gathered + output + COL_BUDGET) * std::mem::size_of::<T>()
    }

    /// Packs and evaluates encoded positions in inference mode.
    pub fn infer_tensors(&self, tensors: &[&FeatureTensor]) -> Result<Output<T>, NnError> {
        self.infer(&pack_inputs(tensors), tensors.len())
    }

    /// Training-mode forward pass: batch statistics, running averages updated.
    pub fn forward_train(&mut self, input: &[T], batch: usize) -> Result<Tape<T>, NnError> {
        self.check_input(input, batch)?;
        let n = self.graph.layers.len();
        let mut acts: Vec<Vec<T>> = vec![Vec::new(); n];
        let mut stats = vec![None; n];
        acts[0] = input.to_vec();
        for i in 1..n {
            let mut st = None;
            acts[i] = self.layer_forward(i, &acts, batch, Some(&mut st));
            if let Some((mean, var, inv)) = st {
                let m: T = cst(BN_MOMENTUM);
                let cols = acts[i].len() / mean.len();
                let unbias: T = if cols > 1 { cst(cols as f64 / (cols - 1) as f64) } else { T::one() };
                let (rm, rv) = (self.slots[i][2], self.slots[i][3]);
                for c in 0..mean.len() {
                    let r = &mut self.params[rm].data[c];
                    *r = m * *r + (T::one() - m) * mean[c];
                    let r = &mut self.params[rv].data[c];
                    *r = m * *r + (T::one() - m) * var[c] * unbias;
                }
                stats[i] = Some((mean, inv));
            }
        }
        let output = self.collect_output(&acts, batch);
        Ok(Tape { batch, acts, stats, output })
    }

    fn collect_output(&self, acts: &[Vec<T>], batch: usize) -> Output<T> {
        let s = self.points();
        let transpose = |v: &[T]| {
            let mut out = vec![T::zero(); v.len()];
            for f in 0..s {
                for b in 0..batch {
                    out[b * s + f] = v[f * batch + b];
                }
            }
            out
        };
        let g = &self.graph;
        Output {
            batch,
            policy: transpose(&acts[g.policy]),
            policy_logits: transpose(&acts[g.layers[g.policy].inputs[0]]),
            value: acts[g.value].clone(),
            value_logits: acts[g.layers[g.value].inputs[0]].clone(),
        }
    }

    /// Computes layer `i`. In training mode `stats` receives batch-norm
    /// (mean, biased variance, inverse std).
    #[allow(clippy::type_complexity)]
    fn layer_forward(&self, i: usize, acts: &[Vec<T>], b: usize, stats: Option<&mut Option<(Vec<T>, Vec<T>, Vec<T>)>>) -> Vec<T> {
        let layer = &self.graph.layers[i];
        let x = &acts[layer.inputs[0]];
        let s = self.points();
        let board = self.spec.board;
        let p = |k: usize| &self.params[self.slots[i][k]].data;
        match layer.op {
            Op::Input => unreachable!(),
            Op::Conv { kernel, cin, cout, bias } => {
                let mut y = vec![T::zero(); cout * b * s];
                conv_forward(x, p(0), kernel, cin, cout, b, board, &mut y);
                if bias {
                    add_row_bias(&mut y, p(1), b * s);
                }
                y
            }
            Op::Depthwise { channels, .. } => depthwise_forward(x, p(0), channels, b, board),
            Op::BatchNorm { channels } => {
                let cols = x.len() / channels;
                let (gamma, beta) = (p(0), p(1));
                let eps: T = cst(BN_EPSILON);
                let mut y = vec![T::zero(); x.len()];
                let (mean, inv) = match stats {
                    Some(slot) => {
                        let mut mean = vec![T::zero(); channels];
                        let mut var = vec![T::zero(); channels];
                        let mut inv = vec![T::zero(); channels];
                        let nf: T = cst(cols as f64);
                        for c in 0..channels {
                            let row = &x[c * cols..(c + 1) * cols];
                            let mu = row.iter().fold(T::zero(), |a, &v| a + v) / nf;
                            let va = row.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / nf;
                            mean[c] = mu;
                            var[c] = va;
                            inv[c] = T::one() / (va + eps).sqrt();
                        }
                        *slot = Some((mean.clone(), var, inv.clone()));
                        (mean, inv)
                    }
                    None => {
                        let mean = p(2).clone();
                        let inv = p(3).iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                        (mean, inv)
                    }
                };
                for c in 0..channels {
                    let (g, bt, mu, is) = (gamma[c], beta[c], mean[c], inv[c]);
                    let scale = g * is;
                    for (o, &v) in y[c * cols..(c + 1) * cols].iter_mut().zip(&x[c * cols..(c + 1) * cols]) {
                        *o = (v - mu) * scale + bt;
                    }
                }
                y
            }
            Op::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
            Op::Add => {
                let y2 = &acts[layer.inputs[1]];
                x.iter().zip(y2).map(|(&a, &c)| a + c).collect()
            }
            Op::GlobalAvgPool => {
                let c = layer.shape.channels;
                let inv: T = cst(1.0 / s as f64);
                let mut y = vec![T::zero(); c * b];
                for (o, chunk) in y.iter_mut().zip(x.chunks_exact(s)) {
                    *o = chunk.iter().fold(T::zero(), |a, &v| a + v) * inv;
                }
                y
            }
            Op::Flatten => {
                let c = x.len() / (b * s);
                let mut y = vec![T::zero(); x.len()];
                for ch in 0..c {
                    for bi in 0..b {
                        for pt in 0..s {
                            y[(ch * s + pt) * b + bi] = x[(ch * b + bi) * s + pt];
                        }
                    }
                }
                y
            }
            Op::Dense { inputs, outputs, bias } => {
                let mut y = vec![T::zero(); outputs * b];
                gemm(outputs, inputs, b, view(p(0), 0, inputs, 1), view(x, 0, b, 1), false, &mut y, 0, b);
                if bias {
                    add_row_bias(&mut y, p(1), b);
                }
                y
            }
            Op::Softmax => {
                let f = layer.shape.channels;
                let mut y = vec![T::zero(); x.len()];
                for bi in 0..b {
                    let mx = (0..f).map(|k| x[k * b + bi]).fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for k in 0..f {
                        let e = (x[k * b + bi] - mx).exp();
                        y[k * b + bi] = e;
                        sum = sum + e;
                    }
                    for k in 0..f {
                        y[k * b + bi] = y[k * b + bi] / sum;
                    }
                }
                y
            }
            Op::Sigmoid => x.iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect(),
        }
    }

    /// Gradients of a loss with respect to every parameter, given the loss
    /// gradient at the policy scores (`[batch][points]`) and value scores.
    /// Running statistics receive zero gradient.
    pub fn backward(&self, tape: &Tape<T>, d_policy_logits: &[T], d_value_logits: &[T]) -> Vec<Vec<T>> {
        let b = tape.batch;
        let s = self.points();
        let g = &self.graph;
        let n = g.layers.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        let mut dpl = vec![T::zero(); s * b];
        for bi in 0..b {
            for f in 0..s {
                dpl[f * b + bi] = d_policy_logits[bi * s + f];
            }
        }
        grads[g.layers[g.policy].inputs[0]] = Some(dpl);
        accumulate(&mut grads[g.layers[g.value].inputs[0]], d_value_logits.to_vec());
        let mut pgrads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        let board = self.spec.board;
        for i in (1..n).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let layer = &g.layers[i];
            let xi = layer.inputs[0];
            let x = &tape.acts[xi];
            let p = |k: usize| &self.params[self.slots[i][k]].data;
            let dx = match layer.op {
                Op::Input | Op::Softmax | Op::Sigmoid => continue,
                Op::Conv { kernel, cin, cout, bias } => {
                    if bias {
                        row_sums(&dy, b * s, &mut pgrads[self.slots[i][1]]);
                    }
                    let (w, dw) = (p(0), self.slots[i][0]);
                    let mut dx = vec![T::zero(); x.len()];
                    conv_backward(x, w, &dy, kernel, cin, cout, b, board, &mut pgrads[dw], &mut dx);
                    dx
                }
                Op::Depthwise { channels, .. } => {
                    let dw = self.slots[i][0];
                    depthwise_backward(x, p(0), &dy, channels, b, board, &mut pgrads[dw])
                }
                Op::BatchNorm { channels } => {
                    let (mean, inv) = tape.stats[i].as_ref().expect("training tape");
                    let cols = x.len() / channels;
                    let gamma = p(0);
                    let nf: T = cst(cols as f64);
                    let mut dx = vec![T::zero(); x.len()];
                    for c in 0..channels {
                        let xs = &x[c * cols..(c + 1) * cols];
                        let ds = &dy[c * cols..(c + 1) * cols];
                        let (mu, is) = (mean[c], inv[c]);
                        let mut sd = T::zero();
                        let mut sdx = T::zero();
                        for (&v, &d) in xs.iter().zip(ds) {
                            sd = sd + d;
                            sdx = sdx + d * (v - mu) * is;
                        }
                        pgrads[self.slots[i][0]][c] = pgrads[self.slots[i][0]][c] + sdx;
                        pgrads[self.slots[i][1]][c] = pgrads[self.slots[i][1]][c] + sd;
                        let k = gamma[c] * is / nf;
                        for ((o, &v), &d) in dx[c * cols..(c + 1) * cols].iter_mut().zip(xs).zip(ds) {
                            *o = k * (nf * d - sd - (v - mu) * is * sdx);
                        }
                    }
                    dx
                }
                Op::Relu => {
                    let y = &tape.acts[i];
                    dy.iter().zip(y).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect()
                }
                Op::Add => {
                    accumulate(&mut grads[layer.inputs[1]], dy.clone());
                    dy
                }
                Op::GlobalAvgPool => {
                    let inv: T = cst(1.0 / s as f64);
                    let mut dx = vec![T::zero(); x.len()];
                    for (chunk, &d) in dx.chunks_exact_mut(s).zip(&dy) {
                        chunk.iter_mut().for_each(|v| *v = d * inv);
                    }
                    dx
                }
                Op::Flatten => {
                    let c = x.len() / (b * s);
                    let mut dx = vec![T::zero(); x.len()];
                    for ch in 0..c {
                        for bi in 0..b {
                            for pt in 0..s {
                                dx[(ch * b + bi) * s + pt] = dy[(ch * s + pt) * b + bi];
                            }
                        }
                    }
                    dx
                }
                Op::Dense { inputs, outputs, bias } => {
                    if bias {
                        row_sums(&dy, b, &mut pgrads[self.slots[i][1]]);
                    }
                    let dw = self.slots[i][0];
                    gemm(outputs, b, inputs, view(&dy, 0, b, 1), view(x, 0, 1, b), true, &mut pgrads[dw], 0, inputs);
                    let mut dx = vec![T::zero(); inputs * b];
                    gemm(inputs, outputs, b, view(p(0), 0, 1, inputs), view(&dy, 0, b, 1), false, &mut dx, 0, b);
                    dx
                }
            };
            accumulate(&mut grads[xi], dx);
        }
        pgrads
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a = *a + v),
    }
}

fn add_row_bias<T: Scalar>(y: &mut [T], bias: &[T], cols: usize) {
    for (row, &bv) in y.chunks_exact_mut(cols).zip(bias) {
        row.iter_mut().for_each(|v| *v = *v + bv);
    }
}

fn row_sums<T: Scalar>(dy: &[T], cols: usize, out: &mut [T]) {
    for (o, row) in out.iter_mut().zip(dy.chunks_exact(cols)) {
        *o = *o + row.iter().fold(T::zero(), |a, &v| a + v);
    }
}

/// Samples per im2col chunk.
fn chunk_samples(cin: usize, b: usize, s: usize) -> usize {
    (COL_BUDGET / (cin * 9 * s).max(1)).clamp(1, b)
}

/// col[(ci*9 + ky*3 + kx)][local sample * s + point] for samples b0..b0+nb.
fn im2col<T: Scalar>(x: &[T], cin: usize, b: usize, board: usize, b0: usize, nb: usize, col: &mut [T]) {
    let s = board * board;
    let width = nb * s;
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * width..][..width];
                for lb in 0..nb {
                    let src = &x[(ci * b + b0 + lb) * s..][..s];
                    let dst = &mut row[lb * s..][..s];
                    for yy in 0..board {
                        let sy = yy as isize + ky as isize - 1;
                        let drow = &mut dst[yy * board..][..board];
                        if sy < 0 || sy >= board as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let srow = &src[sy as usize * board..][..board];
                        for (xx, d) in drow.iter_mut().enumerate() {
                            let sx = xx as isize + kx as isize - 1;
                            *d = if sx < 0 || sx >= board as isize { T::zero() } else { srow[sx as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Inverse of [`im2col`], accumulating into `dx`.
fn col2im<T: Scalar>(col: &[T], cin: usize, b: usize, board: usize, b0: usize, nb: usize, dx: &mut [T]) {
    let s = board * board;
    let width = nb * s;
    for ci in 0..cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * width..][..width];
                for lb in 0..nb {
                    let dst = &mut dx[(ci * b + b0 + lb) * s..][..s];
                    let src = &row[lb * s..][..s];
                    for yy in 0..board {
                        let sy = yy as isize + ky as isize - 1;
                        if sy < 0 || sy >= board as isize {
                            continue;
                        }
                        for xx in 0..board {
                            let sx = xx as isize + kx as isize - 1;
                            if sx >= 0 && sx < board as isize {
                                let d = &mut dst[sy as usize * board + sx as usize];
                                *d = *d + src[yy * board + xx];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Scalar>(x: &[T], w: &[T], kernel: usize, cin: usize, cout: usize, b: usize, board: usize, y: &mut [T]) {
    let s = board * board;
    let bs = b * s;
    if kernel == 1 {
        gemm(cout, cin, bs, view(w, 0, cin, 1), view(x, 0, bs, 1), false, y, 0, bs);
        return;
    }
    let cs = chunk_samples(cin, b, s);
    let mut col = vec![T::zero(); cin * 9 * cs * s];
    let mut b0 = 0;
    while b0 < b {
        let nb = cs.min(b - b0);
        let width = nb * s;
        im2col(x, cin, b, board, b0, nb, &mut col);
        gemm(cout, cin * 9, width, view(w, 0, cin * 9, 1), view(&col, 0, width, 1), false, y, b0 * s, bs);
        b0 += nb;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(x: &[T], w: &[T], dy: &[T], kernel: usize, cin: usize, cout: usize, b: usize, board: usize, dw: &mut [T], dx: &mut [T]) {
    let s = board * board;
    let bs = b * s;
    if kernel == 1 {
        gemm(cout, bs, cin, view(dy, 0, bs, 1), view(x, 0, 1, bs), true, dw, 0, cin);
        gemm(cin, cout, bs, view(w, 0, 1, cin), view(dy, 0, bs, 1), false, dx, 0, bs);
        return;
    }
    let k9 = cin * 9;
    let cs = chunk_samples(cin, b, s);
    let mut col = vec![T::zero(); k9 * cs * s];
    let mut b0 = 0;
    while b0 < b {
        let nb = cs.min(b - b0);
        let width = nb * s;
        im2col(x, cin, b, board, b0, nb, &mut col);
        gemm(cout, width, k9, view(dy, b0 * s, bs, 1), view(&col, 0, 1, width), true, dw, 0, k9);
        gemm(k9, cout, width, view(w, 0, 1, k9), view(dy, b0 * s, bs, 1), false, &mut col, 0, width);
        col2im(&col, cin, b, board, b0, nb, dx);
        b0 += nb;
    }
}

fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], channels: usize, b: usize, board: usize) -> Vec<T> {
    let s = board * board;
    let mut y = vec![T::zero(); x.len()];
    for c in 0..channels {
        let k = &w[c * 9..c * 9 + 9];
        for bi in 0..b {
            let base = (c * b + bi) * s;
            let src = &x[base..base + s];
            let dst = &mut y[base..base + s];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = k[ky * 3 + kx];
                    let (y0, y1) = (1usize.saturating_sub(ky), (board + 1 - ky).min(board));
                    let (x0, x1) = (1usize.saturating_sub(kx), (board + 1 - kx).min(board));
                    for yy in y0..y1 {
                        let sy = yy + ky - 1;
                        let drow = &mut dst[yy * board + x0..yy * board + x1];
                        let srow = &src[sy * board + x0 + kx - 1..sy * board + x1 + kx - 1];
                        for (d, &v) in drow.iter_mut().zip(srow) {
                            *d = *d + wv * v;
                        }
                    }
                }
            }
        }
    }
    y
}

fn depthwise_backward<T: Scalar>(x: &[T], w: &[T], dy: &[T], channels: usize, b: usize, board: usize, dw: &mut [T]) -> Vec<T> {
    let s = board * board;
    let mut dx = vec![T::zero(); x.len()];
    for c in 0..channels {
        for bi in 0..b {
            let base = (c * b + bi) * s;
            let src = &x[base..base + s];
            let ds = &dy[base..base + s];
            for ky in 0..3 {
                for kx in 0..3 {
                    let wv = w[c * 9 + ky * 3 + kx];
                    let mut acc = T::zero();
                    let (y0, y1) = (1usize.saturating_sub(ky), (board + 1 - ky).min(board));
                    let (x0, x1) = (1usize.saturating_sub(kx), (board + 1 - kx).min(board));
                    for yy in y0..y1 {
                        let sy = yy + ky - 1;
                        let drow = &ds[yy * board + x0..yy * board + x1];
                        let so = sy * board + x0 + kx - 1;
                        let srow = &src[so..so + (x1 - x0)];
                        for (&d, &v) in drow.iter().zip(srow) {
                            acc = acc + d * v;
                        }
                        let dxrow = &mut dx[base + so..base + so + (x1 - x0)];
                        for (o, &d) in dxrow.iter_mut().zip(drow) {
                            *o = *o + d * wv;
                        }
                    }
                    dw[c * 9 + ky * 3 + kx] = dw[c * 9 + ky * 3 + kx] + acc;
                }
            }
        }
    }
    dx
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"MGNN";

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn error(&self, offset: usize, what: &str) -> NnError {
        NnError::Format {
            offset,
            what: what.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], NnError> {
        if self.bytes.len() - self.at < n {
            return Err(self.error(self.at, &format!("truncated {}", what)));
        }
        self.at += n;
        Ok(&self.bytes[self.at - n..self.at])
    }

    fn u16(&mut self, what: &str) -> Result<u16, NnError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, NnError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
const CHECKPOINT_VERSION: u8 = 1;

impl Network<f32> {
    /// Serializes the canonical spec name, board size and every weight as
    /// little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let name = self.spec.name();
        let mut out = Vec::with_capacity(16 + name.len() + 4 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.push(self.spec.board as u8);
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.push(p.kind.code());
            out.extend_from_slice(&(p.data.len() as u32).to_le_bytes());
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Network<f32>, NnError> {
        let mut r = ByteReader { bytes, at: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(r.error(0, "bad magic"));
        }
        let version = r.take(1, "version")?[0];
        if version != CHECKPOINT_VERSION {
            return Err(r.error(4, &format!("unsupported version {}", version)));
        }
        let board = r.take(1, "board")?[0] as usize;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.error(8, "name is not utf-8"))?
            .to_string();
        let spec = NetworkSpec::parse(&name)?.with_board(board);
        let mut net: Network<f32> = Network::new(&spec, &mut rand::rngs::mock::StepRng::new(0, 1))?;
        let at = r.at;
        let count = r.u32("tensor count")? as usize;
        if count != net.params.len() {
            return Err(r.error(at, &format!("{} tensors, expected {}", count, net.params.len())));
        }
        for p in net.params.iter_mut() {
            let at = r.at;
            let kind = r.take(1, "tensor kind")?[0];
            let n = r.u32("tensor length")? as usize;
            if kind != p.kind.code() || n != p.data.len() {
                return Err(r.error(at, &format!("tensor kind {} with {} values does not match the network", kind, n)));
            }
            let raw = r.take(4 * n, "weights")?;
            for (d, c) in p.data.iter_mut().zip(raw.chunks_exact(4)) {
                *d = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            }
        }
        if r.at != bytes.len() {
            return Err(r.error(r.at, "trailing bytes"));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Network<f32>, NnError> {
        Network::from_bytes(&fs::read(path)?)
    }
}

/// True if the architecture survives the checkpoint's name encoding.
pub fn nameable(spec: &NetworkSpec) -> bool {
    NetworkSpec::parse(&spec.name()).map(|s| s.with_board(spec.board) == *spec).unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::encode;
    use crate::goban::Position;
    use crate::synth::random_game;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_inputs(n: usize, seed: u64) -> Vec<FeatureTensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();
        while out.len() < n {
            let g = random_game(5, &mut rng);
            let positions = g.replay().unwrap();
            for p in positions.iter().step_by(3) {
                out.push(encode(p));
            }
        }
        out.truncate(n);
        out
    }

    fn spec(name: &str, board: usize) -> NetworkSpec {
        NetworkSpec::parse(name).unwrap().with_board(board)
    }

    #[test]
    fn zeroed_heads_give_uniform_policy() {
        for name in ["a0.2.8", "a0.conv.2.8", "mobile.conv.2.8.16"] {
            let mut net: Network = Network::new(&spec(name, 9), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            net.zero_output_layers();
            let empty = encode(&Position::new(9).unwrap());
            let out = net.infer_tensors(&[&empty]).unwrap();
            assert!(out.policy.iter().all(|&p| (p - 1.0 / 81.0).abs() < 1e-6), "{}", name);
            assert!((out.value[0] - 0.5).abs() < 1e-7);
        }
    }

    #[test]
    fn blocked_inference_matches_single_pass() {
        let net: Network = Network::new(&spec("mobile.conv.2.16.64", 9), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let batch = 2 * net.infer_block_size() + 3;
        let mut inputs = vec![encode(&Position::new(9).unwrap())];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        while inputs.len() < batch {
            let g = random_game(9, &mut rng);
            inputs.extend(g.replay().unwrap().iter().step_by(7).map(encode));
        }
        inputs.truncate(batch);
        let refs: Vec<_> = inputs.iter().collect();
        let packed = pack_inputs(&refs);
        let blocked = net.infer(&packed, batch).unwrap();
        let whole = net.infer_unchecked(packed, batch);
        assert_eq!(blocked.policy, whole.policy);
        assert_eq!(blocked.policy_logits, whole.policy_logits);
        assert_eq!(blocked.value, whole.value);
        assert_eq!(blocked.value_logits, whole.value_logits);
    }

    #[test]
    fn policy_rows_sum_to_one_and_batch_independent() {
        let inputs = toy_inputs(16, 2);
        let refs: Vec<_> = inputs.iter().collect();
        for name in ["a0.2.8", "a0.conv.2.8", "mobile.2.8.24"] {
            let net: Network = Network::new(&spec(name, 5), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
            let all = net.infer_tensors(&refs).unwrap();
            for b in 0..16 {
                let sum: f32 = all.policy[b * 25..(b + 1) * 25].iter().sum();
                assert!((sum - 1.0).abs() < 1e-5);
                assert!((0.0..=1.0).contains(&all.value[b]));
            }
            let one = net.infer_tensors(&[refs[5]]).unwrap();
            for k in 0..25 {
                assert!((one.policy[k] - all.policy[5 * 25 + k]).abs() < 1e-4);
            }
            assert_eq!(net.infer_tensors(&refs).unwrap(), all);
        }
    }

    #[test]
    fn shape_errors() {
        let net: Network = Network::new(&spec("a0.1.4", 5), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(net.infer(&[0.0; 10], 1).is_err());
        assert!(net.infer(&[], 0).is_err());
    }

    /// Loss: sum of policy logits times fixed random coefficients plus value
    /// logits, a linear probe that exercises every path.
    fn probe_loss(net: &mut Network<f64>, input: &[f64], b: usize, cp: &[f64], cv: &[f64]) -> f64 {
        let tape = net.forward_train(input, b).unwrap();
        let o = &tape.output;
        o.policy.iter().zip(cp).map(|(a, c)| a * c).sum::<f64>() + o.value.iter().zip(cv).map(|(a, c)| a * c).sum::<f64>()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let inputs = toy_inputs(4, 9);
        let refs: Vec<_> = inputs.iter().collect();
        let x: Vec<f64> = pack_inputs(&refs);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for name in ["a0.2.4", "a0.conv.2.4", "mobile.2.4.8", "mobile.conv.2.4.8"] {
            let base: Network<f64> = Network::new(&spec(name, 5), &mut rng).unwrap();
            let cp: Vec<f64> = (0..4 * 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cv: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut net = base.clone();
            let tape = net.forward_train(&x, 4).unwrap();
            // Chain rule through softmax and sigmoid to the scores.
            let o = &tape.output;
            let mut dpl = vec![0.0; 100];
            for b in 0..4 {
                let row = &o.policy[b * 25..(b + 1) * 25];
                let dot: f64 = row.iter().zip(&cp[b * 25..]).map(|(p, c)| p * c).sum();
                for k in 0..25 {
                    dpl[b * 25 + k] = row[k] * (cp[b * 25 + k] - dot);
                }
            }
            let dvl: Vec<f64> = (0..4).map(|b| cv[b] * o.value[b] * (1.0 - o.value[b])).collect();
            let grads = net.backward(&tape, &dpl, &dvl);
            let mut checked = 0;
            while checked < 50 {
                let pi = rng.gen_range(0..base.params.len());
                if !base.params[pi].kind.trainable() {
                    continue;
                }
                let k = rng.gen_range(0..base.params[pi].data.len());
                let h = 1e-5;
                let mut plus = base.clone();
                plus.params[pi].data[k] += h;
                let mut minus = base.clone();
                minus.params[pi].data[k] -= h;
                let fd = (probe_loss(&mut plus, &x, 4, &cp, &cv) - probe_loss(&mut minus, &x, 4, &cp, &cv)) / (2.0 * h);
                let an = grads[pi][k];
                let rel = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-6));
                assert!(
                    rel < 1e-3 || (fd - an).abs() < 1e-8,
                    "{} param {} ({:?}) idx {}: fd {} analytic {}",
                    name,
                    pi,
                    base.params[pi].kind,
                    k,
                    fd,
                    an
                );
                checked += 1;
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net: Network = Network::new(&spec("mobile.conv.avg.bin.val4.2.8.24", 9), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let bytes = net.to_bytes();
        let back = Network::from_bytes(&bytes).unwrap();
        assert_eq!(back.spec(), net.spec());
        assert_eq!(back.params(), net.params());
        assert_eq!(back.to_bytes(), bytes);
        assert!(Network::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Network::from_bytes(&bad).is_err());
    }
}
