//! The k-step inner SGD rule that adapts θ and h together.

use std::borrow::Cow;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backprop::{check_batch, loss_and_grad_unchecked, loss_is_finite};
use super::{Embedding, ModelParams};
use crate::data::TransitionDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Hyperparameters of the inner update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InnerUpdateConfig {
    /// Number of gradient steps.
    pub k: usize,
    /// Learning rate for the network parameters.
    pub alpha: f64,
    /// Learning rate for the embedding.
    pub beta: f64,
    /// Mini-batch size used when the dataset is larger than this.
    pub batch_size: usize,
    /// Always use the whole dataset.
    pub full_batch: bool,
}

impl Default for InnerUpdateConfig {
    fn default() -> Self {
        Self {
            k: 10,
            alpha: 0.01,
            beta: 0.01,
            batch_size: BatchSize::DEFAULT,
            full_batch: false,
        }
    }
}

impl InnerUpdateConfig {
    pub fn new(k: usize, alpha: f64, beta: f64) -> Self {
        Self {
            k,
            alpha,
            beta,
            ..Self::default()
        }
    }

    pub fn batch(&self) -> BatchSize {
        if self.full_batch {
            BatchSize::Full
        } else {
            BatchSize::Max(self.batch_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("inner k must be >= 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0 && self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config("inner learning rates must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// How a gradient step picks its batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    /// Full batch up to this many transitions, uniform mini-batches beyond.
    Max(usize),
}

impl BatchSize {
    pub const DEFAULT: usize = 256;

    pub(crate) fn select<'a, T: Scalar, R: Rng + ?Sized>(
        self,
        data: &'a TransitionDataset<T>,
        rng: &mut R,
    ) -> Cow<'a, TransitionDataset<T>> {
        match self {
            BatchSize::Max(n) if data.len() > n => Cow::Owned(data.sample_batch(n, rng)),
            _ => Cow::Borrowed(data),
        }
    }
}

/// Runs `cfg.k` SGD steps from `(params, embedding)` on `data` and returns the
/// adapted copies; the inputs are left untouched.
///
/// Each step evaluates both gradients on the same batch at the current point:
/// `θ ← θ - α ∇θ L`, `h ← h - β ∇h L`. The RNG is only consumed when the data
/// exceeds the mini-batch size.
pub fn inner_update<T: Scalar, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    embedding: &Embedding<T>,
    data: &TransitionDataset<T>,
    cfg: &InnerUpdateConfig,
    rng: &mut R,
) -> Result<(ModelParams<T>, Embedding<T>)> {
    check_batch(params, embedding, data)?;
    let alpha = T::of(cfg.alpha);
    let beta = T::of(cfg.beta);
    let mut theta = params.clone();
    let mut h = embedding.clone();
    for step in 0..cfg.k {
        let batch = cfg.batch().select(data, rng);
        let (loss, g) = loss_and_grad_unchecked(&theta, &h.values, &batch);
        if !loss_is_finite(loss, &g) {
            return Err(Error::Diverged { step });
        }
        theta.sgd_step(&g.params, alpha);
        h.sgd_step(&g.embedding, beta);
    }
    if !theta.is_finite() || !h.is_finite() {
        return Err(Error::Diverged { step: cfg.k });
    }
    Ok((theta, h))
}
