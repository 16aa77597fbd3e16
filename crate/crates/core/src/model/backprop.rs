//! Gaussian negative log-likelihood (unit variance) and its exact gradients.
//!
//! With the variance fixed to one and constants dropped, the loss of a batch
//! is `mean_b 0.5 * ||(s'_b - s_b) - f(s_b, a_b, h)||^2`.

use super::{Embedding, ModelParams, Workspace};
use crate::data::TransitionDataset;
use crate::error::{Error, Result};
use crate::scalar::{all_finite, Scalar};

/// Gradient with the same layout as the layers of [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad<T> {
    pub weights: Vec<Vec<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> ParamGrad<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self {
            weights: params
                .layers
                .iter()
                .map(|l| vec![T::zero(); l.weights.len()])
                .collect(),
            biases: params
                .layers
                .iter()
                .map(|l| vec![T::zero(); l.bias.len()])
                .collect(),
        }
    }

    /// Flattened in the same order as [`ModelParams::flatten`].
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    fn scale(&mut self, k: T) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for x in v.iter_mut() {
                *x *= k;
            }
        }
    }
}

/// Gradients of the loss with respect to θ and the embedding input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient<T> {
    pub params: ParamGrad<T>,
    pub embedding: Vec<T>,
}

pub(crate) fn check_batch<T: Scalar>(
    params: &ModelParams<T>,
    embedding: &Embedding<T>,
    batch: &TransitionDataset<T>,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Usage("loss requested on an empty batch".into()));
    }
    if embedding.dim() != params.arch.embed_dim {
        return Err(Error::Config(format!(
            "embedding has dim {}, model expects {}",
            embedding.dim(),
            params.arch.embed_dim
        )));
    }
    if !embedding.is_finite() {
        return Err(Error::Input("non-finite embedding".into()));
    }
    batch.validate(params.arch.state_dim, params.arch.action_dim)
}

#[inline]
fn half_sq_residual<T: Scalar>(pred: &[T], state: &[T], next: &[T], resid: &mut [T]) -> T {
    let mut acc = T::zero();
    for i in 0..pred.len() {
        let r = pred[i] - (next[i] - state[i]);
        resid[i] = r;
        acc += r * r;
    }
    acc * T::of(0.5)
}

/// Mean unit-variance Gaussian NLL of the batch, constants dropped.
pub fn nll_loss<T: Scalar>(
    params: &ModelParams<T>,
    embedding: &Embedding<T>,
    batch: &TransitionDataset<T>,
) -> Result<T> {
    check_batch(params, embedding, batch)?;
    Ok(nll_loss_unchecked(params, &embedding.values, batch))
}

pub(crate) fn nll_loss_unchecked<T: Scalar>(
    params: &ModelParams<T>,
    embedding: &[T],
    batch: &TransitionDataset<T>,
) -> T {
    let mut ws = Workspace::new(params);
    let mut resid = vec![T::zero(); params.arch.state_dim];
    let mut total = T::zero();
    for t in batch.iter() {
        let pred = params.forward_ws(&t.state, &t.action, embedding, &mut ws);
        total += half_sq_residual(pred, &t.state, &t.next_state, &mut resid);
    }
    total / T::of(batch.len() as f64)
}

/// Exact backpropagation gradients of [`nll_loss`].
pub fn grad<T: Scalar>(
    params: &ModelParams<T>,
    embedding: &Embedding<T>,
    batch: &TransitionDataset<T>,
) -> Result<Gradient<T>> {
    loss_and_grad(params, embedding, batch).map(|(_, g)| g)
}

/// Loss and gradients from one pass over the batch. Samples are reduced in
/// batch order, so the result is deterministic.
pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    embedding: &Embedding<T>,
    batch: &TransitionDataset<T>,
) -> Result<(T, Gradient<T>)> {
    check_batch(params, embedding, batch)?;
    Ok(loss_and_grad_unchecked(params, &embedding.values, batch))
}

pub(crate) fn loss_and_grad_unchecked<T: Scalar>(
    params: &ModelParams<T>,
    embedding: &[T],
    batch: &TransitionDataset<T>,
) -> (T, Gradient<T>) {
    let n_layers = params.layers.len();
    let mut ws = Workspace::new(params);
    let mut g = ParamGrad::zeros_like(params);
    let mut g_emb = vec![T::zero(); embedding.len()];
    let mut resid = vec![T::zero(); params.arch.state_dim];
    let max_width = params
        .arch
        .layer_sizes()
        .into_iter()
        .max()
        .unwrap_or(0);
    // d(loss)/d(layer output) for the current layer, and for its input.
    let mut d_out = vec![T::zero(); max_width];
    let mut d_in = vec![T::zero(); max_width];
    let embed_off = params.arch.state_dim + params.arch.action_dim;
    let mut total = T::zero();

    for t in batch.iter() {
        params.forward_ws(&t.state, &t.action, embedding, &mut ws);
        total += half_sq_residual(&ws.acts[n_layers - 1], &t.state, &t.next_state, &mut resid);
        d_out[..resid.len()].copy_from_slice(&resid);

        for li in (0..n_layers).rev() {
            let layer = &params.layers[li];
            let out = &ws.acts[li];
            let input: &[T] = if li == 0 { &ws.input } else { &ws.acts[li - 1] };
            // pre-activation delta, in place
            for (d, &y) in d_out[..layer.out_dim].iter_mut().zip(out) {
                *d *= layer.activation.derivative_from_output(y);
            }
            let gw = &mut g.weights[li];
            let gb = &mut g.biases[li];
            for r in 0..layer.out_dim {
                let dr = d_out[r];
                gb[r] += dr;
                let row = &mut gw[r * layer.in_dim..(r + 1) * layer.in_dim];
                for (gwc, &x) in row.iter_mut().zip(input) {
                    *gwc += dr * x;
                }
            }
            let need_input_grad = li > 0 || !embedding.is_empty();
            if need_input_grad {
                for v in d_in[..layer.in_dim].iter_mut() {
                    *v = T::zero();
                }
                for r in 0..layer.out_dim {
                    let dr = d_out[r];
                    let row = &layer.weights[r * layer.in_dim..(r + 1) * layer.in_dim];
                    for (di, &w) in d_in[..layer.in_dim].iter_mut().zip(row) {
                        *di += dr * w;
                    }
                }
                std::mem::swap(&mut d_out, &mut d_in);
            }
        }
        // after the loop d_out holds d(loss)/d(input) of layer 0
        if !embedding.is_empty() {
            for (ge, &d) in g_emb.iter_mut().zip(&d_out[embed_off..embed_off + embedding.len()]) {
                *ge += d;
            }
        }
    }

    let inv_n = T::one() / T::of(batch.len() as f64);
    g.scale(inv_n);
    for v in &mut g_emb {
        *v *= inv_n;
    }
    (
        total / T::of(batch.len() as f64),
        Gradient {
            params: g,
            embedding: g_emb,
        },
    )
}

pub(crate) fn loss_is_finite<T: Scalar>(loss: T, g: &Gradient<T>) -> bool {
    loss.is_finite()
        && all_finite(&g.embedding)
        && g.params.weights.iter().all(|w| all_finite(w))
        && g.params.biases.iter().all(|b| all_finite(b))
}
