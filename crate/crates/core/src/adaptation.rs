//! Online adaptation: the sliding observation window, most-likely embedding
//! selection, and the joint k-step fine-tune of `(θ, h)`.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Transition, TransitionDataset};
use crate::error::{Error, Result};
use crate::model::{inner_update, nll_loss, Embedding, EmbeddingTable, InnerUpdateConfig, ModelParams};
use crate::scalar::Scalar;

/// FIFO buffer of the `M` most recent real transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationWindow<T> {
    buffer: VecDeque<Transition<T>>,
    capacity: usize,
}

impl<T: Scalar> ObservationWindow<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("window size M must be >= 1".into()));
        }
        Ok(Self {
            buffer: VecDeque::with_capacity(capacity + 1),
            capacity,
        })
    }

    /// Appends `t`, evicting the oldest entry once the window is over capacity.
    pub fn push(&mut self, t: Transition<T>) {
        self.buffer.push_back(t);
        if self.buffer.len() > self.capacity {
            self.buffer.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition<T>> {
        self.buffer.iter()
    }

    /// Contents, oldest first, as an unlabeled dataset.
    pub fn to_dataset(&self) -> TransitionDataset<T> {
        TransitionDataset::new(self.buffer.iter().cloned().collect())
    }
}

/// Value-passing form of [`ObservationWindow::push`].
pub fn window_push<T: Scalar>(mut window: ObservationWindow<T>, t: Transition<T>) -> ObservationWindow<T> {
    window.push(t);
    window
}

/// Model produced by one adaptation round.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel<T> {
    pub theta_star: ModelParams<T>,
    pub h_star: Embedding<T>,
    /// Index of the meta-trained embedding the adaptation started from.
    pub source_index: usize,
    pub window_size_at_adaptation: usize,
}

impl<T: Scalar> AdaptedModel<T> {
    /// Wraps parameters that have not been fine-tuned.
    pub fn unadapted(theta: ModelParams<T>, h: Embedding<T>, source_index: usize) -> Self {
        Self {
            theta_star: theta,
            h_star: h,
            source_index,
            window_size_at_adaptation: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub inner: InnerUpdateConfig,
    /// Window size M.
    pub window: usize,
    /// Re-adapt every K control steps.
    pub every: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            inner: InnerUpdateConfig::default(),
            window: 64,
            every: 10,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        if self.window == 0 || self.every == 0 {
            return Err(Error::Config("window and adaptation period must be >= 1".into()));
        }
        Ok(())
    }
}

/// Index of the smallest loss; NaN counts as worst, ties go to the lowest index.
pub fn argmin_lowest_index<T: Scalar>(losses: &[T]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &l) in losses.iter().enumerate() {
        let l = if l.is_nan() { T::infinity() } else { l };
        match best {
            None => best = Some(i),
            Some(b) => {
                let lb = if losses[b].is_nan() { T::infinity() } else { losses[b] };
                if l < lb {
                    best = Some(i);
                }
            }
        }
    }
    best
}

/// Mean NLL of `data` under `θ_meta` for every table entry.
pub fn embedding_losses<T: Scalar>(
    theta_meta: &ModelParams<T>,
    table: &EmbeddingTable<T>,
    data: &TransitionDataset<T>,
) -> Result<Vec<T>> {
    if data.is_empty() {
        return Err(Error::Usage("embedding selection needs a nonempty window".into()));
    }
    table.iter().map(|h| nll_loss(theta_meta, h, data)).collect()
}

/// Index of the embedding that maximizes the window's mean log-likelihood
/// under `θ_meta`, i.e. minimizes the NLL loss.
pub fn select_embedding<T: Scalar>(
    theta_meta: &ModelParams<T>,
    table: &EmbeddingTable<T>,
    window: &ObservationWindow<T>,
) -> Result<usize> {
    select_embedding_on(theta_meta, table, &window.to_dataset())
}

/// [`select_embedding`] over an arbitrary dataset.
pub fn select_embedding_on<T: Scalar>(
    theta_meta: &ModelParams<T>,
    table: &EmbeddingTable<T>,
    data: &TransitionDataset<T>,
) -> Result<usize> {
    let losses = embedding_losses(theta_meta, table, data)?;
    Ok(argmin_lowest_index(&losses).expect("table is nonempty"))
}

/// Diagnostics of one adaptation round.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptationReport<T> {
    pub model: AdaptedModel<T>,
    /// Window loss of every meta-trained embedding under `θ_meta`.
    pub embedding_losses: Vec<T>,
    /// Window loss at `(θ_meta, h_likely)`.
    pub pre_loss: T,
    /// Window loss at `(θ*, h*)`.
    pub post_loss: T,
}

/// Selects `h_likely` and runs the inner update from `(θ_meta, h_likely)` on
/// the window. Always restarts from `θ_meta`.
pub fn adapt<T: Scalar, R: Rng + ?Sized>(
    theta_meta: &ModelParams<T>,
    table: &EmbeddingTable<T>,
    window: &ObservationWindow<T>,
    cfg: &InnerUpdateConfig,
    rng: &mut R,
) -> Result<AdaptedModel<T>> {
    adapt_detailed(theta_meta, table, &window.to_dataset(), cfg, rng).map(|r| r.model)
}

/// [`adapt`] on a dataset, also returning the selection and loss diagnostics.
pub fn adapt_detailed<T: Scalar, R: Rng + ?Sized>(
    theta_meta: &ModelParams<T>,
    table: &EmbeddingTable<T>,
    data: &TransitionDataset<T>,
    cfg: &InnerUpdateConfig,
    rng: &mut R,
) -> Result<AdaptationReport<T>> {
    let losses = embedding_losses(theta_meta, table, data)?;
    let index = argmin_lowest_index(&losses).expect("table is nonempty");
    let h_likely = table.get(index).expect("index from table");
    let (theta_star, h_star) = inner_update(theta_meta, h_likely, data, cfg, rng)?;
    let post_loss = nll_loss(&theta_star, &h_star, data)?;
    Ok(AdaptationReport {
        model: AdaptedModel {
            theta_star,
            h_star,
            source_index: index,
            window_size_at_adaptation: data.len(),
        },
        pre_loss: losses[index],
        embedding_losses: losses,
        post_loss,
    })
}
