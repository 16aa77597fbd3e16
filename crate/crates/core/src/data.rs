//! Transition tuples and per-situation datasets.

use std::path::Path;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{all_finite, Scalar};

/// One observed `(s, a, s')` tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<T> {
    pub state: Vec<T>,
    pub action: Vec<T>,
    pub next_state: Vec<T>,
}

impl<T: Scalar> Transition<T> {
    pub fn new(state: Vec<T>, action: Vec<T>, next_state: Vec<T>) -> Self {
        Self {
            state,
            action,
            next_state,
        }
    }

    /// Regression target `s' - s`.
    pub fn delta(&self) -> Vec<T> {
        self.next_state
            .iter()
            .zip(&self.state)
            .map(|(&n, &s)| n - s)
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        all_finite(&self.state) && all_finite(&self.action) && all_finite(&self.next_state)
    }
}

/// Ordered transitions collected under one situation.
///
/// `situation_index` is known for meta-training data and `None` for data
/// gathered online.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset<T> {
    pub transitions: Vec<Transition<T>>,
    pub situation_index: Option<usize>,
}

impl<T> Default for TransitionDataset<T> {
    fn default() -> Self {
        Self {
            transitions: Vec::new(),
            situation_index: None,
        }
    }
}

impl<T: Scalar> TransitionDataset<T> {
    pub fn new(transitions: Vec<Transition<T>>) -> Self {
        Self {
            transitions,
            situation_index: None,
        }
    }

    pub fn with_situation(mut self, index: usize) -> Self {
        self.situation_index = Some(index);
        self
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn push(&mut self, t: Transition<T>) {
        self.transitions.push(t);
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Transition<T>> {
        self.transitions.iter()
    }

    /// `(state_dim, action_dim)` of the first transition, if any.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.transitions
            .first()
            .map(|t| (t.state.len(), t.action.len()))
    }

    /// Checks that every transition has the given dimensions and finite entries.
    pub fn validate(&self, state_dim: usize, action_dim: usize) -> Result<()> {
        for (i, t) in self.transitions.iter().enumerate() {
            if t.state.len() != state_dim
                || t.next_state.len() != state_dim
                || t.action.len() != action_dim
            {
                return Err(Error::Config(format!(
                    "transition {i} has dims (s={}, a={}, s'={}), expected (s={state_dim}, a={action_dim})",
                    t.state.len(),
                    t.action.len(),
                    t.next_state.len()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Input(format!("transition {i} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Copies the transitions at `indices`, keeping the situation label.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            transitions: indices.iter().map(|&i| self.transitions[i].clone()).collect(),
            situation_index: self.situation_index,
        }
    }

    /// Uniform sample of `size` distinct transitions.
    pub fn sample_batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Self {
        let picked = index::sample(rng, self.len(), size.min(self.len())).into_vec();
        self.subset(&picked)
    }

    /// Seeded random split into two halves; the first gets `ceil(len / 2)`.
    pub fn split_halves<R: Rng + ?Sized>(&self, rng: &mut R) -> (Self, Self) {
        let perm = index::sample(rng, self.len(), self.len()).into_vec();
        let cut = self.len().div_ceil(2);
        (self.subset(&perm[..cut]), self.subset(&perm[cut..]))
    }

    /// Writes the dataset as CSV with header `s_0..,a_0..,ns_0..`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let (sd, ad) = self.dims().unwrap_or((0, 0));
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(csv_header(sd, ad))?;
        for t in &self.transitions {
            let row: Vec<String> = t
                .state
                .iter()
                .chain(&t.action)
                .chain(&t.next_state)
                .map(|v| format_real(v.as_f64()))
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dataset written by [`TransitionDataset::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let count = |prefix: &str| header.iter().filter(|h| h.starts_with(prefix)).count();
        let sd = count("s_");
        let ad = count("a_");
        if count("ns_") != sd || header.len() != 2 * sd + ad {
            return Err(Error::Format(format!(
                "{}: unexpected dataset header",
                path.display()
            )));
        }
        let expected = csv_header(sd, ad);
        if header.iter().zip(&expected).any(|(a, b)| a != b) {
            return Err(Error::Format(format!(
                "{}: header columns out of order",
                path.display()
            )));
        }
        let mut out = Self::default();
        for rec in r.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map(T::of)
                        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
                })
                .collect::<Result<Vec<T>>>()?;
            out.push(Transition::new(
                vals[..sd].to_vec(),
                vals[sd..sd + ad].to_vec(),
                vals[sd + ad..].to_vec(),
            ));
        }
        Ok(out)
    }
}

fn csv_header(sd: usize, ad: usize) -> Vec<String> {
    (0..sd)
        .map(|i| format!("s_{i}"))
        .chain((0..ad).map(|i| format!("a_{i}")))
        .chain((0..sd).map(|i| format!("ns_{i}")))
        .collect()
}

/// Shortest decimal representation that round-trips exactly.
pub(crate) fn format_real(v: f64) -> String {
    format!("{v:?}")
}
