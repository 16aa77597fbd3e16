//! Random-shooting model-predictive control.
//!
//! Candidates are sampled uniformly within the action bounds, rolled out
//! through the learned model, scored by undiscounted summed reward, and the
//! first action of the best one is returned. Each candidate draws from its own
//! RNG stream derived from `(seed, candidate index)`, so scoring order and
//! parallelism do not affect the result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::AdaptedModel;
use crate::error::{Error, Result};
use crate::model::Workspace;
use crate::scalar::Scalar;

/// Reward `r(s_t, a_t, s_{t+1})`.
pub trait Reward<T>: Sync {
    fn reward(&self, state: &[T], action: &[T], next_state: &[T]) -> T;
}

impl<T, F> Reward<T> for F
where
    F: Fn(&[T], &[T], &[T]) -> T + Sync,
{
    fn reward(&self, state: &[T], action: &[T], next_state: &[T]) -> T {
        self(state, action, next_state)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Planning horizon in steps.
    pub horizon: usize,
    /// Number of sampled candidate trajectories.
    pub n_candidates: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub rng_seed: u64,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 15,
            n_candidates: 500,
            action_low: Vec::new(),
            action_high: Vec::new(),
            rng_seed: 0,
        }
    }
}

impl MpcConfig {
    pub fn with_bounds(mut self, low: Vec<f64>, high: Vec<f64>) -> Self {
        self.action_low = low;
        self.action_high = high;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn action_dim(&self) -> usize {
        self.action_low.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.n_candidates == 0 {
            return Err(Error::Config("horizon and n_candidates must be >= 1".into()));
        }
        if self.action_low.len() != self.action_high.len() {
            return Err(Error::Config("action bound lengths differ".into()));
        }
        if self
            .action_low
            .iter()
            .zip(&self.action_high)
            .any(|(l, h)| !(l.is_finite() && h.is_finite() && l < h))
        {
            return Err(Error::Config("action bounds need low < high".into()));
        }
        Ok(())
    }
}

/// `horizon x action_dim` actions, row-major by time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionTrajectory<T> {
    pub actions: Vec<T>,
    pub action_dim: usize,
}

impl<T: Scalar> ActionTrajectory<T> {
    pub fn new(actions: Vec<T>, action_dim: usize) -> Self {
        Self {
            actions,
            action_dim,
        }
    }

    pub fn horizon(&self) -> usize {
        if self.action_dim == 0 {
            0
        } else {
            self.actions.len() / self.action_dim
        }
    }

    pub fn action(&self, t: usize) -> &[T] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    /// Uniform trajectory within the configured bounds.
    pub fn sample<R: Rng + ?Sized>(cfg: &MpcConfig, rng: &mut R) -> Self {
        let d = cfg.action_dim();
        let mut actions = Vec::with_capacity(cfg.horizon * d);
        for _ in 0..cfg.horizon {
            for (&lo, &hi) in cfg.action_low.iter().zip(&cfg.action_high) {
                actions.push(T::of(rng.random_range(lo..=hi)));
            }
        }
        Self::new(actions, d)
    }
}

/// Candidate `index` of a plan with this config; identical to what
/// [`plan`] samples for that index.
pub fn sample_candidate<T: Scalar>(cfg: &MpcConfig, index: usize) -> ActionTrajectory<T> {
    let mut rng = candidate_rng(cfg.rng_seed, index);
    ActionTrajectory::sample(cfg, &mut rng)
}

fn candidate_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutScore<T> {
    pub trajectory_index: usize,
    /// Summed reward, or `-inf` when the rollout diverged.
    pub total_reward: T,
    /// `(horizon + 1)` predicted states starting with `s0`.
    pub predicted_states: Vec<Vec<T>>,
    pub diverged: bool,
}

/// Rolls `traj` out through the adapted model from `s0` and sums
/// `r(s_t, a_t, ŝ_{t+1})` over the horizon.
pub fn rollout_score<T: Scalar, R: Reward<T> + ?Sized>(
    model: &AdaptedModel<T>,
    reward: &R,
    s0: &[T],
    traj: &ActionTrajectory<T>,
) -> Result<RolloutScore<T>> {
    let arch = &model.theta_star.arch;
    if s0.len() != arch.state_dim
        || traj.action_dim != arch.action_dim
        || model.h_star.dim() != arch.embed_dim
        || traj.actions.len() != traj.horizon() * traj.action_dim
    {
        return Err(Error::Config("rollout dims do not match model".into()));
    }
    let mut ws = Workspace::new(&model.theta_star);
    Ok(rollout_with(model, reward, s0, traj, 0, &mut ws))
}

fn rollout_with<T: Scalar, R: Reward<T> + ?Sized>(
    model: &AdaptedModel<T>,
    reward: &R,
    s0: &[T],
    traj: &ActionTrajectory<T>,
    index: usize,
    ws: &mut Workspace<T>,
) -> RolloutScore<T> {
    let horizon = traj.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    states.push(s0.to_vec());
    let mut total = T::zero();
    let mut diverged = false;
    for t in 0..horizon {
        let s = &states[t];
        let a = traj.action(t);
        let delta = model
            .theta_star
            .forward_ws(s, a, &model.h_star.values, ws);
        let next: Vec<T> = s.iter().zip(delta).map(|(&x, &d)| x + d).collect();
        if next.iter().any(|v| !v.is_finite()) {
            diverged = true;
            break;
        }
        total += reward.reward(s, a, &next);
        states.push(next);
    }
    if !total.is_finite() {
        diverged = true;
    }
    RolloutScore {
        trajectory_index: index,
        total_reward: if diverged { T::neg_infinity() } else { total },
        predicted_states: states,
        diverged,
    }
}

/// Result of one planning call.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome<T> {
    pub action: Vec<T>,
    pub best_index: usize,
    /// Total reward per candidate, in candidate order.
    pub scores: Vec<T>,
}

/// First action of the best of `n_candidates` random trajectories.
pub fn plan<T: Scalar, R: Reward<T> + ?Sized>(
    model: &AdaptedModel<T>,
    reward: &R,
    s0: &[T],
    cfg: &MpcConfig,
) -> Result<Vec<T>> {
    plan_detailed(model, reward, s0, cfg).map(|o| o.action)
}

/// [`plan`] with all candidate scores. Ties go to the lowest index.
pub fn plan_detailed<T: Scalar, R: Reward<T> + ?Sized>(
    model: &AdaptedModel<T>,
    reward: &R,
    s0: &[T],
    cfg: &MpcConfig,
) -> Result<PlanOutcome<T>> {
    cfg.validate()?;
    let arch = &model.theta_star.arch;
    if cfg.action_dim() != arch.action_dim || s0.len() != arch.state_dim {
        return Err(Error::Config("planner dims do not match model".into()));
    }
    let scores: Vec<T> = (0..cfg.n_candidates)
        .into_par_iter()
        .map_init(
            || Workspace::new(&model.theta_star),
            |ws, i| {
                let traj = sample_candidate(cfg, i);
                rollout_with(model, reward, s0, &traj, i, ws).total_reward
            },
        )
        .collect();
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if s == T::neg_infinity() {
            continue;
        }
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    let best_index = best.ok_or(Error::PlanningFailed {
        candidates: cfg.n_candidates,
    })?;
    let action = sample_candidate::<T>(cfg, best_index).action(0).to_vec();
    Ok(PlanOutcome {
        action,
        best_index,
        scores,
    })
}
