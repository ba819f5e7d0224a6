//! A small dense network with softmax output, trained by plain SGD.
//!
//! Parameters live in one flat vector: for every layer, the `out x in`
//! row-major weight block followed by the `out` biases. All arithmetic is
//! generic over the scalar so the same code runs in `f32` for training and in
//! `f64` for gradient checks.

use num_traits::Float;
use rand::Rng;
use std::fmt::Debug;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fed::LogitTable;

/// Scalar type usable by the network.
pub trait Scalar: Float + Debug + Default + Send + Sync + 'static {}
impl<T: Float + Debug + Default + Send + Sync + 'static> Scalar for T {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Tanh),
            _ => None,
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - y * y,
        }
    }
}

/// Layer widths from input to output, plus the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arch {
    dims: Vec<usize>,
    activation: Activation,
}

impl Arch {
    pub fn new(dims: Vec<usize>, activation: Activation) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(
                "architecture needs an input and an output width, all >= 1",
            ));
        }
        Ok(Self { dims, activation })
    }

    /// `input -> hidden... -> classes` with ReLU hidden units.
    pub fn mlp(input: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(classes);
        Self::new(dims, Activation::Relu)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.dims.windows(2).map(|w| (w[0], w[1]))
    }

    pub fn param_count(&self) -> usize {
        self.layers().map(|(i, o)| i * o + o).sum()
    }

    /// FLOPs per training sample: a forward pass at two FLOPs per
    /// multiply-accumulate, plus the backward pass charged at twice that.
    pub fn flops_per_sample(&self) -> u64 {
        let macs: u64 = self.layers().map(|(i, o)| (i * o) as u64).sum();
        3 * 2 * macs
    }

    /// Size of one uploaded model in bits (32-bit parameters).
    pub fn update_bits(&self) -> u64 {
        32 * self.param_count() as u64
    }
}

/// Size of one uploaded logit table in bits: `C` vectors of `C` 32-bit values.
pub fn logit_table_bits(num_classes: usize) -> u64 {
    32 * (num_classes * num_classes) as u64
}

/// Flat parameter vector tied to an architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    arch: Arch,
    values: Vec<T>,
}

/// Gradient aligned with [`ModelParams::values`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector<T = f32> {
    pub values: Vec<T>,
}

impl<T: Scalar> GradientVector<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![T::zero(); len],
        }
    }

    pub fn norm(&self) -> T {
        self.values.iter().fold(T::zero(), |a, &v| a + v * v).sqrt()
    }
}

/// Softmax output on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxVector<T = f32>(Vec<T>);

impl<T: Scalar> SoftmaxVector<T> {
    pub fn probs(&self) -> &[T] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

pub(crate) fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Indices into a local dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatch {
    indices: Vec<usize>,
}

impl MiniBatch {
    pub fn new(indices: Vec<usize>, dataset_len: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("mini-batch must be non-empty"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= dataset_len) {
            return Err(Error::invalid(format!(
                "mini-batch index {bad} out of range for dataset of {dataset_len}"
            )));
        }
        Ok(Self { indices })
    }

    /// Every sample of a dataset of `len` samples.
    pub fn full(len: usize) -> Self {
        assert!(len > 0, "mini-batch must be non-empty");
        Self {
            indices: (0..len).collect(),
        }
    }

    /// `size` distinct indices drawn uniformly; the whole set when `size >= len`.
    pub fn sample(rng: &mut impl Rng, len: usize, size: usize) -> Self {
        if size >= len {
            return Self::full(len);
        }
        let mut indices = rand::seq::index::sample(rng, len, size).into_vec();
        indices.sort_unstable();
        Self { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Scratch space for one model: per-layer activations, transposed weights
/// for the forward pass, and transposed weight gradients for the backward
/// pass.
struct Workspace<T> {
    acts: Vec<Vec<T>>,
    delta: Vec<T>,
    delta_prev: Vec<T>,
    /// Per layer: `offset`, `n_in`, `n_out`.
    layers: Vec<(usize, usize, usize)>,
    /// Per layer, weights laid out input-major (`n_in x n_out`).
    wt: Vec<Vec<T>>,
    /// Per layer, weight gradients in the same layout as `wt`.
    gt: Vec<Vec<T>>,
    probs: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    fn new(m: &ModelParams<T>) -> Self {
        let arch = &m.arch;
        let max = *arch.dims.iter().max().unwrap();
        let mut layers = Vec::new();
        let mut off = 0;
        for (n_in, n_out) in arch.layers() {
            layers.push((off, n_in, n_out));
            off += n_in * n_out + n_out;
        }
        let wt = layers
            .iter()
            .map(|&(off, n_in, n_out)| {
                let mut t = vec![T::zero(); n_in * n_out];
                for o in 0..n_out {
                    for i in 0..n_in {
                        t[i * n_out + o] = m.values[off + o * n_in + i];
                    }
                }
                t
            })
            .collect();
        Self {
            acts: arch.dims.iter().map(|&d| vec![T::zero(); d]).collect(),
            delta: vec![T::zero(); max],
            delta_prev: vec![T::zero(); max],
            layers,
            wt,
            gt: Vec::new(),
            probs: vec![T::zero(); arch.num_classes()],
        }
    }

    fn start_gradient(&mut self) {
        self.gt = self.layers.iter().map(|&(_, i, o)| vec![T::zero(); i * o]).collect();
    }

    /// Writes the accumulated weight gradients into the flat parameter
    /// layout of `grad`.
    fn finish_gradient(&self, grad: &mut [T]) {
        for (&(off, n_in, n_out), gt) in self.layers.iter().zip(&self.gt) {
            for o in 0..n_out {
                for i in 0..n_in {
                    grad[off + o * n_in + i] = grad[off + o * n_in + i] + gt[i * n_out + o];
                }
            }
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(arch: Arch) -> Self {
        let values = vec![T::zero(); arch.param_count()];
        Self { arch, values }
    }

    /// He-uniform weights, zero biases.
    pub fn init(arch: Arch, rng: &mut impl Rng) -> Self {
        let mut values = Vec::with_capacity(arch.param_count());
        for (fan_in, out) in arch.layers() {
            let limit = (6.0 / fan_in as f64).sqrt();
            values.extend((0..fan_in * out).map(|_| T::from(rng.random_range(-limit..limit)).unwrap()));
            values.extend((0..out).map(|_| T::zero()));
        }
        Self { arch, values }
    }

    pub fn from_values(arch: Arch, values: Vec<T>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::DimensionMismatch {
                expected: arch.param_count(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters must be finite"));
        }
        Ok(Self { arch, values })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            values: self.values.iter().map(|v| U::from(*v).unwrap()).collect(),
        }
    }

    fn check_input(&self, x: &[f32]) -> Result<()> {
        if x.len() != self.arch.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.arch.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim(),
                got: data.dim(),
            });
        }
        Ok(())
    }

    /// Runs the network; leaves pre-softmax logits in the last activation
    /// slot. Hidden layers hold post-activation values.
    fn forward_into(&self, x: &[f32], ws: &mut Workspace<T>) {
        for (dst, &src) in ws.acts[0].iter_mut().zip(x) {
            *dst = T::from(src).unwrap();
        }
        let last = ws.layers.len() - 1;
        for l in 0..ws.layers.len() {
            let (off, n_in, n_out) = ws.layers[l];
            let (before, after) = ws.acts.split_at_mut(l + 1);
            let input = &before[l];
            let output = &mut after[0][..n_out];
            output.copy_from_slice(&self.values[off + n_in * n_out..off + n_in * n_out + n_out]);
            let wt = &ws.wt[l];
            for (&a, w) in input.iter().zip(wt.chunks_exact(n_out)) {
                axpy(output, a, w);
            }
            if l != last {
                for v in output.iter_mut() {
                    *v = self.arch.activation.apply(*v);
                }
            }
        }
    }

    /// Backpropagates `ws.delta[..C]` (gradient w.r.t. the logits), adding
    /// the weight gradient into `ws.gt` and the bias gradient into `grad`.
    fn backward_accumulate(&self, ws: &mut Workspace<T>, grad: &mut [T]) {
        for l in (0..ws.layers.len()).rev() {
            let (off, n_in, n_out) = ws.layers[l];
            let delta = &ws.delta[..n_out];
            let gt = &mut ws.gt[l];
            for (&a, g) in ws.acts[l].iter().zip(gt.chunks_exact_mut(n_out)) {
                axpy(g, a, delta);
            }
            let bias = &mut grad[off + n_in * n_out..off + n_in * n_out + n_out];
            for (b, &d) in bias.iter_mut().zip(delta) {
                *b = *b + d;
            }
            if l == 0 {
                break;
            }
            let weights = &self.values[off..off + n_in * n_out];
            let prev = &mut ws.delta_prev[..n_in];
            prev.fill(T::zero());
            for (&d, w) in delta.iter().zip(weights.chunks_exact(n_in)) {
                axpy(prev, d, w);
            }
            for (p, &a) in prev.iter_mut().zip(ws.acts[l].iter()) {
                *p = *p * self.arch.activation.derivative_from_output(a);
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_prev);
        }
    }

    /// Class probabilities for one input.
    pub fn forward(&self, x: &[f32]) -> Result<SoftmaxVector<T>> {
        self.check_input(x)?;
        let mut ws = Workspace::new(self);
        self.forward_into(x, &mut ws);
        let logits = ws.acts.last().unwrap();
        Ok(SoftmaxVector(softmax(logits)))
    }

    /// Pre-softmax outputs for one input.
    pub fn logits(&self, x: &[f32]) -> Result<Vec<T>> {
        self.check_input(x)?;
        let mut ws = Workspace::new(self);
        self.forward_into(x, &mut ws);
        Ok(ws.acts.pop().unwrap())
    }

    /// Mean cross-entropy over the batch, plus `beta` times the mean
    /// cross-entropy of each sample's softmax against the global vector of its
    /// label when `global` is given.
    pub fn loss(
        &self,
        batch: &MiniBatch,
        data: &Dataset,
        global: Option<(&LogitTable, T)>,
    ) -> Result<T> {
        self.check_data(data)?;
        let targets = global.map(|(g, b)| teacher_targets::<T>(g, batch, data).map(|t| (t, b))).transpose()?;
        let mut ws = Workspace::new(self);
        let mut total = T::zero();
        for &i in batch.indices() {
            self.forward_into(data.features(i), &mut ws);
            let label = data.label(i);
            let log_p = log_softmax(ws.acts.last().unwrap());
            total = total - log_p[label];
            if let Some((targets, beta)) = &targets {
                let g = targets[label].as_ref().unwrap();
                let kd = g.iter().zip(&log_p).fold(T::zero(), |a, (&gc, &lp)| a - gc * lp);
                total = total + *beta * kd;
            }
        }
        Ok(total / T::from(batch.len()).unwrap())
    }

    fn batch_gradient(
        &self,
        batch: &MiniBatch,
        data: &Dataset,
        teacher: Option<(&[Option<Vec<T>>], T)>,
    ) -> GradientVector<T> {
        let c = self.arch.num_classes();
        let mut ws = Workspace::new(self);
        ws.start_gradient();
        let mut grad = vec![T::zero(); self.values.len()];
        let scale = T::one() / T::from(batch.len()).unwrap();
        for &i in batch.indices() {
            self.forward_into(data.features(i), &mut ws);
            let label = data.label(i);
            softmax_into(ws.acts.last().unwrap(), &mut ws.probs);
            let p = &ws.probs;
            for k in 0..c {
                let onehot = if k == label { T::one() } else { T::zero() };
                ws.delta[k] = p[k] - onehot;
            }
            if let Some((targets, beta)) = teacher {
                let g = targets[label].as_ref().unwrap();
                for k in 0..c {
                    ws.delta[k] = ws.delta[k] + beta * (p[k] - g[k]);
                }
            }
            for d in &mut ws.delta[..c] {
                *d = *d * scale;
            }
            self.backward_accumulate(&mut ws, &mut grad);
        }
        ws.finish_gradient(&mut grad);
        GradientVector { values: grad }
    }

    /// Mean cross-entropy gradient over the batch.
    pub fn grad_fl(&self, batch: &MiniBatch, data: &Dataset) -> Result<GradientVector<T>> {
        self.check_data(data)?;
        Ok(self.batch_gradient(batch, data, None))
    }

    /// Cross-entropy gradient plus `beta` times the gradient of the
    /// distillation term against the global vector of each sample's label.
    ///
    /// Fails with [`Error::MissingLogit`] if the table lacks a label that
    /// occurs in the batch.
    pub fn grad_fd(
        &self,
        batch: &MiniBatch,
        data: &Dataset,
        global: &LogitTable,
        beta: T,
    ) -> Result<GradientVector<T>> {
        self.check_data(data)?;
        if beta < T::zero() {
            return Err(Error::invalid("beta must be >= 0"));
        }
        if beta == T::zero() {
            return Ok(self.batch_gradient(batch, data, None));
        }
        let targets = teacher_targets::<T>(global, batch, data)?;
        Ok(self.batch_gradient(batch, data, Some((&targets, beta))))
    }

    /// Mean softmax output per ground-truth label of the batch; absent labels
    /// stay missing.
    pub fn avg_logits_per_label(&self, batch: &MiniBatch, data: &Dataset) -> Result<LogitTable> {
        self.check_data(data)?;
        let c = self.arch.num_classes();
        let mut sums = vec![vec![0f64; c]; c];
        let mut counts = vec![0usize; c];
        let mut ws = Workspace::new(self);
        for &i in batch.indices() {
            self.forward_into(data.features(i), &mut ws);
            softmax_into(ws.acts.last().unwrap(), &mut ws.probs);
            let p = &ws.probs;
            let label = data.label(i);
            counts[label] += 1;
            for (s, v) in sums[label].iter_mut().zip(p.iter()) {
                *s += v.to_f64().unwrap();
            }
        }
        let entries = sums
            .into_iter()
            .zip(&counts)
            .map(|(s, &m)| {
                (m > 0).then(|| s.iter().map(|v| (v / m as f64) as f32).collect())
            })
            .collect();
        Ok(LogitTable::from_entries_with_counts(entries, counts))
    }

    /// Fraction of `data` classified correctly.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        self.check_data(data)?;
        let mut ws = Workspace::new(self);
        let mut correct = 0usize;
        for s in data.iter() {
            self.forward_into(s.features, &mut ws);
            if argmax(ws.acts.last().unwrap()) == s.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

/// One SGD step: `values - mu * g`.
pub fn sgd_step<T: Scalar>(m: &ModelParams<T>, g: &GradientVector<T>, mu: T) -> ModelParams<T> {
    let mut next = m.clone();
    sgd_step_in_place(&mut next, g, mu);
    next
}

pub fn sgd_step_in_place<T: Scalar>(m: &mut ModelParams<T>, g: &GradientVector<T>, mu: T) {
    assert_eq!(m.values.len(), g.values.len(), "gradient/parameter length mismatch");
    for (v, d) in m.values.iter_mut().zip(&g.values) {
        *v = *v - mu * *d;
    }
}

fn teacher_targets<T: Scalar>(
    global: &LogitTable,
    batch: &MiniBatch,
    data: &Dataset,
) -> Result<Vec<Option<Vec<T>>>> {
    let c = data.num_classes();
    if global.num_classes() != c {
        return Err(Error::DimensionMismatch {
            expected: c,
            got: global.num_classes(),
        });
    }
    let mut needed = vec![false; c];
    for &i in batch.indices() {
        needed[data.label(i)] = true;
    }
    (0..c)
        .map(|n| {
            if !needed[n] {
                return Ok(None);
            }
            global
                .get(n)
                .map(|v| Some(v.iter().map(|&x| T::from(x).unwrap()).collect()))
                .ok_or(Error::MissingLogit(n))
        })
        .collect()
}

/// `y += a * x`
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y = *y + a * *x;
    }
}

fn softmax_into<T: Scalar>(z: &[T], out: &mut [T]) {
    let max = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut sum = T::zero();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum = sum + *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

pub(crate) fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = z.iter().fold(T::zero(), |a, &b| a + (b - max).exp()).ln() + max;
    z.iter().map(|&v| v - lse).collect()
}

const PARAMS_MAGIC: &[u8; 4] = b"MLPW";

impl ModelParams<f32> {
    /// Serialises as: magic `MLPW`, `u32` width count, the widths as `u32`,
    /// `u32` activation code, `u64` value count, then the values as
    /// little-endian `f32`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 4 * (self.arch.dims.len() + self.values.len()));
        out.extend_from_slice(PARAMS_MAGIC);
        out.extend_from_slice(&(self.arch.dims.len() as u32).to_le_bytes());
        for &d in &self.arch.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.arch.activation.code().to_le_bytes());
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Format("truncated parameter file".into()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4)? != PARAMS_MAGIC {
            return Err(Error::Format("bad parameter file magic".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let n_dims = u32_at(take(4)?) as usize;
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            dims.push(u32_at(take(4)?) as usize);
        }
        let activation = Activation::from_code(u32_at(take(4)?))
            .ok_or_else(|| Error::Format("unknown activation code".into()))?;
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let arch = Arch::new(dims, activation)?;
        if count != arch.param_count() {
            return Err(Error::Format(format!(
                "value count {count} does not match architecture ({})",
                arch.param_count()
            )));
        }
        let raw = take(4 * count)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_values(arch, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ModelParams<f32>, Dataset) {
        let data = synth_dataset(5, 3, 4, 6).unwrap();
        let arch = Arch::mlp(4, &[5], 3).unwrap();
        let m = ModelParams::init(arch, &mut ChaCha8Rng::seed_from_u64(1));
        (m, data)
    }

    #[test]
    fn zero_weights_give_uniform_output() {
        let m = ModelParams::<f32>::zeros(Arch::mlp(3, &[4], 5).unwrap());
        let p = m.forward(&[0.3, 0.1, 0.9]).unwrap();
        for &v in p.probs() {
            assert!((v - 0.2).abs() < 1e-7);
        }
    }

    #[test]
    fn forward_is_on_simplex_and_matches_logit_argmax() {
        let (m, data) = small();
        for s in data.iter() {
            let p = m.forward(s.features).unwrap();
            let sum: f32 = p.probs().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(p.probs().iter().all(|&v| v >= 0.0));
            assert_eq!(p.argmax(), argmax(&m.logits(s.features).unwrap()));
        }
        assert!(matches!(m.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn duplicated_batch_gives_same_gradient() {
        let (m, data) = small();
        let once = MiniBatch::new(vec![0, 3, 7], data.len()).unwrap();
        let twice = MiniBatch::new(vec![0, 3, 7, 0, 3, 7], data.len()).unwrap();
        let a = m.cast::<f64>().grad_fl(&once, &data).unwrap();
        let b = m.cast::<f64>().grad_fl(&twice, &data).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_fd_with_zero_beta_equals_grad_fl() {
        let (m, data) = small();
        let batch = MiniBatch::full(data.len());
        let table = m.avg_logits_per_label(&batch, &data).unwrap();
        let fl = m.grad_fl(&batch, &data).unwrap();
        let fd = m.grad_fd(&batch, &data, &table, 0.0).unwrap();
        assert_eq!(fl, fd);
    }

    #[test]
    fn grad_fd_missing_entry_is_rejected() {
        let (m, data) = small();
        let batch = MiniBatch::full(data.len());
        let table = LogitTable::missing(3);
        assert!(matches!(
            m.grad_fd(&batch, &data, &table, 1.0),
            Err(Error::MissingLogit(_))
        ));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let (m, _) = small();
        let n = m.values().len();
        let zero = GradientVector::zeros(n);
        assert_eq!(sgd_step(&m, &zero, 0.5), m);
        let ones = GradientVector { values: vec![1.0f32; n] };
        let stepped = sgd_step(&m, &ones, 0.01);
        for (a, b) in stepped.values().iter().zip(m.values()) {
            assert!((b - a - 0.01).abs() < 1e-6);
        }
        let mf = m.cast::<f64>();
        let g = GradientVector { values: vec![0.3f64; n] };
        let two = sgd_step(&sgd_step(&mf, &g, 0.1), &g, 0.1);
        let one = sgd_step(&mf, &g, 0.2);
        for (a, b) in two.values().iter().zip(one.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_logits_single_sample_and_mass_identity() {
        let (m, data) = small();
        let one = MiniBatch::new(vec![4], data.len()).unwrap();
        let t = m.avg_logits_per_label(&one, &data).unwrap();
        let label = data.label(4);
        assert_eq!(t.get(label).unwrap(), m.forward(data.features(4)).unwrap().probs());
        assert_eq!(t.present_count(), 1);

        let batch = MiniBatch::new(vec![0, 1, 2, 7, 8, 13], data.len()).unwrap();
        let t = m.avg_logits_per_label(&batch, &data).unwrap();
        assert_eq!(t.counts().iter().sum::<usize>(), batch.len());
        let mut weighted = [0f64; 3];
        for n in 0..3 {
            if let Some(v) = t.get(n) {
                let sum: f32 = v.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6);
                for k in 0..3 {
                    weighted[k] += t.counts()[n] as f64 * v[k] as f64;
                }
            }
        }
        let mut direct = [0f64; 3];
        for &i in batch.indices() {
            for (k, p) in m.forward(data.features(i)).unwrap().probs().iter().enumerate() {
                direct[k] += *p as f64;
            }
        }
        for k in 0..3 {
            assert!((weighted[k] - direct[k]).abs() < 1e-5);
        }
    }

    #[test]
    fn counting_rules() {
        let arch = Arch::mlp(7, &[], 3).unwrap();
        assert_eq!(arch.param_count(), 7 * 3 + 3);
        assert_eq!(arch.update_bits(), 32 * (7 * 3 + 3));
        assert_eq!(arch.flops_per_sample(), 6 * 21);
        assert_eq!(logit_table_bits(10), 3200);
    }

    #[test]
    fn serialization_roundtrip_and_errors() {
        let (m, _) = small();
        let bytes = m.to_bytes();
        assert_eq!(ModelParams::from_bytes(&bytes).unwrap(), m);
        assert!(ModelParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ModelParams::from_bytes(&bad), Err(Error::Format(_))));
    }
}
