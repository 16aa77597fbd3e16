//! Embedding-conditioned dynamics model.
//!
//! A fixed multilayer perceptron maps `(normalized state, normalized action,
//! embedding)` to the mean of the next-state delta `s' - s`. Hidden layers use
//! `tanh`; the output layer is linear.

mod backprop;
mod update;

pub use backprop::{grad, loss_and_grad, nll_loss, Gradient, ParamGrad};
pub use update::{inner_update, BatchSize, InnerUpdateConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::TransitionDataset;
use crate::error::{Error, Result};
use crate::scalar::{all_finite, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `y`.
    #[inline]
    fn derivative_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Tanh => T::one() - y * y,
            Activation::Identity => T::one(),
        }
    }
}

/// Shape of the network: input is `state_dim + action_dim + embed_dim`,
/// output is `state_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub state_dim: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
}

impl Architecture {
    pub fn new(state_dim: usize, action_dim: usize, embed_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            state_dim,
            action_dim,
            embed_dim,
            hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim + self.action_dim + self.embed_dim
    }

    pub fn output_dim(&self) -> usize {
        self.state_dim
    }

    /// `[input, hidden.., output]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.output_dim()))
            .collect()
    }

    /// Same network without the embedding input (single-prior baselines).
    pub fn without_embedding(&self) -> Self {
        Self {
            embed_dim: 0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::Config("state_dim must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Dense layer with row-major `out_dim x in_dim` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
    pub activation: Activation,
}

impl<T: Scalar> Layer<T> {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![T::zero(); in_dim * out_dim],
            bias: vec![T::zero(); out_dim],
            activation,
        }
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize) -> T {
        self.weights[row * self.in_dim + col]
    }

    #[inline]
    fn apply(&self, input: &[T], out: &mut [T]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.weights[r * self.in_dim..(r + 1) * self.in_dim];
            let mut acc = self.bias[r];
            for (&w, &x) in row.iter().zip(input) {
                acc += w * x;
            }
            *o = self.activation.apply(acc);
        }
    }
}

/// Per-dimension standardization of states and actions, fitted on the
/// meta-training corpus and stored with the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer<T> {
    pub state_mean: Vec<T>,
    pub state_std: Vec<T>,
    pub action_mean: Vec<T>,
    pub action_std: Vec<T>,
}

impl<T: Scalar> Normalizer<T> {
    pub fn identity(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_mean: vec![T::zero(); state_dim],
            state_std: vec![T::one(); state_dim],
            action_mean: vec![T::zero(); action_dim],
            action_std: vec![T::one(); action_dim],
        }
    }

    /// Mean and population std over every transition's `state` and `action`.
    /// Dimensions with std below `1e-8` (e.g. a blocked joint) get std 1.
    pub fn fit<'a, I>(datasets: I, state_dim: usize, action_dim: usize) -> Self
    where
        I: IntoIterator<Item = &'a TransitionDataset<T>> + Clone,
    {
        let mut n = 0usize;
        let mut s_sum = vec![0.0f64; state_dim];
        let mut a_sum = vec![0.0f64; action_dim];
        for d in datasets.clone() {
            for t in d.iter() {
                n += 1;
                for (acc, v) in s_sum.iter_mut().zip(&t.state) {
                    *acc += v.as_f64();
                }
                for (acc, v) in a_sum.iter_mut().zip(&t.action) {
                    *acc += v.as_f64();
                }
            }
        }
        if n == 0 {
            return Self::identity(state_dim, action_dim);
        }
        let nf = n as f64;
        let s_mean: Vec<f64> = s_sum.iter().map(|v| v / nf).collect();
        let a_mean: Vec<f64> = a_sum.iter().map(|v| v / nf).collect();
        let mut s_var = vec![0.0f64; state_dim];
        let mut a_var = vec![0.0f64; action_dim];
        for d in datasets {
            for t in d.iter() {
                for ((acc, v), m) in s_var.iter_mut().zip(&t.state).zip(&s_mean) {
                    *acc += (v.as_f64() - m).powi(2);
                }
                for ((acc, v), m) in a_var.iter_mut().zip(&t.action).zip(&a_mean) {
                    *acc += (v.as_f64() - m).powi(2);
                }
            }
        }
        let std = |var: f64| {
            let s = (var / nf).sqrt();
            if s < 1e-8 {
                T::one()
            } else {
                T::of(s)
            }
        };
        Self {
            state_mean: s_mean.into_iter().map(T::of).collect(),
            state_std: s_var.into_iter().map(std).collect(),
            action_mean: a_mean.into_iter().map(T::of).collect(),
            action_std: a_var.into_iter().map(std).collect(),
        }
    }

    fn is_valid(&self) -> bool {
        all_finite(&self.state_mean)
            && all_finite(&self.action_mean)
            && self.state_std.iter().all(|s| s.is_finite() && *s > T::zero())
            && self.action_std.iter().all(|s| s.is_finite() && *s > T::zero())
    }
}

/// Network parameters θ together with architecture and input statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub arch: Architecture,
    pub layers: Vec<Layer<T>>,
    pub norm: Normalizer<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero network; predicts a zero delta everywhere.
    pub fn zeros(arch: &Architecture) -> Self {
        let sizes = arch.layer_sizes();
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::zeros(w[0], w[1], activation_for(i, last)))
            .collect();
        Self {
            arch: arch.clone(),
            layers,
            norm: Normalizer::identity(arch.state_dim, arch.action_dim),
        }
    }

    /// Weights uniform on `±1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        for layer in &mut p.layers {
            let bound = 1.0 / (layer.in_dim.max(1) as f64).sqrt();
            for w in &mut layer.weights {
                *w = T::of(rng.random_range(-bound..bound));
            }
        }
        p
    }

    /// Builds parameters from explicit layers, checking the chain.
    pub fn from_layers(
        arch: Architecture,
        layers: Vec<Layer<T>>,
        norm: Normalizer<T>,
    ) -> Result<Self> {
        let p = Self { arch, layers, norm };
        p.validate()?;
        Ok(p)
    }

    pub fn with_normalizer(mut self, norm: Normalizer<T>) -> Self {
        self.norm = norm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        let sizes = self.arch.layer_sizes();
        if self.layers.len() + 1 != sizes.len() {
            return Err(Error::Config(format!(
                "expected {} layers, found {}",
                sizes.len() - 1,
                self.layers.len()
            )));
        }
        for (i, (layer, w)) in self.layers.iter().zip(sizes.windows(2)).enumerate() {
            if layer.in_dim != w[0]
                || layer.out_dim != w[1]
                || layer.weights.len() != w[0] * w[1]
                || layer.bias.len() != w[1]
            {
                return Err(Error::Config(format!("layer {i} does not chain")));
            }
        }
        if self.norm.state_mean.len() != self.arch.state_dim
            || self.norm.state_std.len() != self.arch.state_dim
            || self.norm.action_mean.len() != self.arch.action_dim
            || self.norm.action_std.len() != self.arch.action_dim
        {
            return Err(Error::Config("normalizer dims mismatch".into()));
        }
        if !self.norm.is_valid() {
            return Err(Error::Input("normalizer has invalid entries".into()));
        }
        if !self.is_finite() {
            return Err(Error::Input("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| all_finite(&l.weights) && all_finite(&l.bias))
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Parameters in row-major layer order: `W_0, b_0, W_1, b_1, ..`.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Config(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// `θ ← θ - lr * g`.
    pub fn sgd_step(&mut self, g: &ParamGrad<T>, lr: T) {
        for (l, (gw, gb)) in self.layers.iter_mut().zip(g.weights.iter().zip(&g.biases)) {
            for (w, &d) in l.weights.iter_mut().zip(gw) {
                *w -= lr * d;
            }
            for (b, &d) in l.bias.iter_mut().zip(gb) {
                *b -= lr * d;
            }
        }
    }

    /// `θ ← (1 - rate) θ + rate θ̃`, which is exact at `rate = 0` and `rate = 1`.
    pub fn move_toward(&mut self, target: &Self, rate: T) {
        let keep = T::one() - rate;
        for (l, t) in self.layers.iter_mut().zip(&target.layers) {
            lerp_into(&mut l.weights, &t.weights, keep, rate);
            lerp_into(&mut l.bias, &t.bias, keep, rate);
        }
    }

    fn check_inputs(&self, state: &[T], action: &[T], embedding: &Embedding<T>) -> Result<()> {
        if state.len() != self.arch.state_dim
            || action.len() != self.arch.action_dim
            || embedding.dim() != self.arch.embed_dim
        {
            return Err(Error::Config(format!(
                "input dims (s={}, a={}, h={}) do not match model (s={}, a={}, h={})",
                state.len(),
                action.len(),
                embedding.dim(),
                self.arch.state_dim,
                self.arch.action_dim,
                self.arch.embed_dim
            )));
        }
        if !(all_finite(state) && all_finite(action) && all_finite(&embedding.values)) {
            return Err(Error::Input("non-finite model input".into()));
        }
        Ok(())
    }

    /// Predicted mean of `s' - s`.
    pub fn forward(&self, state: &[T], action: &[T], embedding: &Embedding<T>) -> Result<Vec<T>> {
        self.check_inputs(state, action, embedding)?;
        let mut ws = Workspace::new(self);
        Ok(self.forward_ws(state, action, &embedding.values, &mut ws).to_vec())
    }

    /// Predicted next state `s + forward(s, a, h)`.
    pub fn predict_next(
        &self,
        state: &[T],
        action: &[T],
        embedding: &Embedding<T>,
    ) -> Result<Vec<T>> {
        let delta = self.forward(state, action, embedding)?;
        Ok(state.iter().zip(delta).map(|(&s, d)| s + d).collect())
    }

    pub(crate) fn write_input(&self, state: &[T], action: &[T], embedding: &[T], input: &mut [T]) {
        let n = &self.norm;
        let sd = state.len();
        let ad = action.len();
        for i in 0..sd {
            input[i] = (state[i] - n.state_mean[i]) / n.state_std[i];
        }
        for i in 0..ad {
            input[sd + i] = (action[i] - n.action_mean[i]) / n.action_std[i];
        }
        input[sd + ad..].copy_from_slice(embedding);
    }

    /// Unchecked forward pass reusing `ws`; returns the output delta.
    pub(crate) fn forward_ws<'w>(
        &self,
        state: &[T],
        action: &[T],
        embedding: &[T],
        ws: &'w mut Workspace<T>,
    ) -> &'w [T] {
        self.write_input(state, action, embedding, &mut ws.input);
        for (i, layer) in self.layers.iter().enumerate() {
            let (before, after) = ws.acts.split_at_mut(i);
            let src: &[T] = if i == 0 { &ws.input } else { &before[i - 1] };
            layer.apply(src, &mut after[0]);
        }
        ws.acts.last().expect("at least one layer")
    }
}

fn activation_for(layer: usize, last: usize) -> Activation {
    if layer == last {
        Activation::Identity
    } else {
        Activation::Tanh
    }
}

fn lerp_into<T: Scalar>(dst: &mut [T], target: &[T], keep: T, rate: T) {
    for (d, &t) in dst.iter_mut().zip(target) {
        *d = keep * *d + rate * t;
    }
}

/// Reusable activation buffers for one forward/backward pass.
#[derive(Debug, Clone)]
pub(crate) struct Workspace<T> {
    pub input: Vec<T>,
    pub acts: Vec<Vec<T>>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            input: vec![T::zero(); params.arch.input_dim()],
            acts: params
                .layers
                .iter()
                .map(|l| vec![T::zero(); l.out_dim])
                .collect(),
        }
    }
}

/// Situation embedding `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![T::zero(); dim],
        }
    }

    /// Zero-dimensional embedding used by single-prior baselines.
    pub fn empty() -> Self {
        Self { values: Vec::new() }
    }

    /// Entries drawn from `N(0, 0.1^2)`.
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.1).expect("valid normal");
        Self {
            values: (0..dim).map(|_| T::of(normal.sample(rng))).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.values)
    }

    pub fn sgd_step(&mut self, g: &[T], lr: T) {
        for (h, &d) in self.values.iter_mut().zip(g) {
            *h -= lr * d;
        }
    }

    /// `h ← (1 - rate) h + rate h̃`.
    pub fn move_toward(&mut self, target: &Self, rate: T) {
        lerp_into(&mut self.values, &target.values, T::one() - rate, rate);
    }
}

/// The meta-trained set of situation embeddings, indexed by situation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    entries: Vec<Embedding<T>>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn new(entries: Vec<Embedding<T>>) -> Result<Self> {
        let Some(first) = entries.first() else {
            return Err(Error::Config("embedding table must have at least one entry".into()));
        };
        let d = first.dim();
        if entries.iter().any(|e| e.dim() != d) {
            return Err(Error::Config("embedding table entries differ in dimension".into()));
        }
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(Error::Input("non-finite embedding".into()));
        }
        Ok(Self { entries })
    }

    pub fn init<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Result<Self> {
        Self::new((0..n).map(|_| Embedding::init(dim, rng)).collect())
    }

    /// One zero-dimensional entry, the table of a single-prior model.
    pub fn single_empty() -> Self {
        Self {
            entries: vec![Embedding::empty()],
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].dim()
    }

    pub fn get(&self, i: usize) -> Option<&Embedding<T>> {
        self.entries.get(i)
    }

    pub(crate) fn get_mut(&mut self, i: usize) -> &mut Embedding<T> {
        &mut self.entries[i]
    }

    pub fn entries(&self) -> &[Embedding<T>] {
        &self.entries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Embedding<T>> {
        self.entries.iter()
    }

    /// Elementwise mean over the entries.
    pub fn mean(&self) -> Embedding<T> {
        let n = T::of(self.len() as f64);
        let mut acc = vec![T::zero(); self.dim()];
        for e in &self.entries {
            for (a, &v) in acc.iter_mut().zip(&e.values) {
                *a += v;
            }
        }
        Embedding::new(acc.into_iter().map(|v| v / n).collect())
    }
}

/// Free-function form of [`ModelParams::forward`].
pub fn forward<T: Scalar>(
    params: &ModelParams<T>,
    state: &[T],
    action: &[T],
    embedding: &Embedding<T>,
) -> Result<Vec<T>> {
    params.forward(state, action, embedding)
}
