//! The closed adaptation and control loop on a ground-truth environment.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_detailed, AdaptationConfig, AdaptedModel, ObservationWindow};
use crate::data::{format_real, Transition, TransitionDataset};
use crate::error::{Error, Result};
use crate::model::{inner_update, nll_loss, Embedding, EmbeddingTable, ModelParams};
use crate::mpc::{plan, MpcConfig, Reward};
use crate::scalar::Scalar;
use crate::situations::SituationSpec;

/// Where the controller's model comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ControlPrior<T> {
    /// Meta-trained θ and embedding table. Every adaptation restarts from θ
    /// with the most likely row and fine-tunes on the window. A one-row table
    /// gives the single-prior (MAML / Reptile) baseline.
    Meta {
        theta: ModelParams<T>,
        table: EmbeddingTable<T>,
    },
    /// Adaptive MPC without a prior: parameters persist across adaptations
    /// and are trained on every transition observed so far.
    Scratch { init: ModelParams<T> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub episode_length: usize,
    pub adaptation: AdaptationConfig,
    pub mpc: MpcConfig,
    pub rng_seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            episode_length: 300,
            adaptation: AdaptationConfig::default(),
            mpc: MpcConfig::default(),
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    /// Embedding row the current model was adapted from, once one exists.
    pub selected_index: Option<usize>,
    /// Whether the action came from the planner rather than random exploration.
    pub planned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationEvent {
    pub step: usize,
    pub selected_index: usize,
    pub pre_loss: f64,
    pub post_loss: f64,
    pub embedding_losses: Vec<f64>,
    /// The fine-tune diverged and the unadapted prior was used instead.
    pub fell_back: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub steps: Vec<StepRecord>,
    pub adaptations: Vec<AdaptationEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub cumulative_reward: f64,
    pub steps: usize,
    /// First step whose reward exceeds the threshold.
    pub steps_to_goal: Option<usize>,
    pub goal_threshold: f64,
    pub adaptation_events: Vec<AdaptationEvent>,
}

impl EpisodeLog {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    /// Running sum of rewards after each step.
    pub fn cumulative_rewards(&self) -> Vec<f64> {
        self.steps
            .iter()
            .scan(0.0, |acc, s| {
                *acc += s.reward;
                Some(*acc)
            })
            .collect()
    }

    pub fn cumulative_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn summary(&self, goal_threshold: f64) -> EpisodeSummary {
        EpisodeSummary {
            cumulative_reward: self.cumulative_reward(),
            steps: self.len(),
            steps_to_goal: self
                .steps
                .iter()
                .find(|s| s.reward > goal_threshold)
                .map(|s| s.step),
            goal_threshold,
            adaptation_events: self.adaptations.clone(),
        }
    }

    /// Per-step CSV: `step,reward,cumulative_reward,selected_index,planned,s_..,a_..`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let sd = self.steps.first().map_or(0, |s| s.state.len());
        let ad = self.steps.first().map_or(0, |s| s.action.len());
        let mut header: Vec<String> = ["step", "reward", "cumulative_reward", "selected_index", "planned"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..sd).map(|i| format!("s_{i}")));
        header.extend((0..ad).map(|i| format!("a_{i}")));
        w.write_record(&header)?;
        for (s, cum) in self.steps.iter().zip(self.cumulative_rewards()) {
            let mut row = vec![
                s.step.to_string(),
                format_real(s.reward),
                format_real(cum),
                s.selected_index.map_or(String::new(), |i| i.to_string()),
                s.planned.to_string(),
            ];
            row.extend(s.state.iter().chain(&s.action).map(|v| format_real(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Adaptation diagnostics CSV:
    /// `step,selected_index,pre_loss,post_loss,loss_0..loss_{N-1}`.
    pub fn write_adaptations_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let n = self.adaptations.first().map_or(0, |a| a.embedding_losses.len());
        let mut header: Vec<String> = ["step", "selected_index", "pre_loss", "post_loss"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((0..n).map(|i| format!("loss_{i}")));
        w.write_record(&header)?;
        for a in &self.adaptations {
            let mut row = vec![
                a.step.to_string(),
                a.selected_index.to_string(),
                format_real(a.pre_loss),
                format_real(a.post_loss),
            ];
            row.extend(a.embedding_losses.iter().map(|v| format_real(*v)));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seed of the planner at `step`.
pub fn step_seed(base: u64, step: usize) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((step as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

fn random_action<T: Scalar, R: Rng + ?Sized>(mpc: &MpcConfig, rng: &mut R) -> Vec<T> {
    mpc.action_low
        .iter()
        .zip(&mpc.action_high)
        .map(|(&l, &h)| T::of(rng.random_range(l..=h)))
        .collect()
}

struct Controller<T> {
    prior: ControlPrior<T>,
    scratch_theta: Option<ModelParams<T>>,
    history: TransitionDataset<T>,
}

impl<T: Scalar> Controller<T> {
    fn adapt<R: Rng + ?Sized>(
        &mut self,
        window: &ObservationWindow<T>,
        cfg: &AdaptationConfig,
        step: usize,
        rng: &mut R,
    ) -> Result<(AdaptedModel<T>, AdaptationEvent)> {
        match &self.prior {
            ControlPrior::Meta { theta, table } => {
                let data = window.to_dataset();
                match adapt_detailed(theta, table, &data, &cfg.inner, rng) {
                    Ok(r) => {
                        let ev = AdaptationEvent {
                            step,
                            selected_index: r.model.source_index,
                            pre_loss: r.pre_loss.as_f64(),
                            post_loss: r.post_loss.as_f64(),
                            embedding_losses: r.embedding_losses.iter().map(|l| l.as_f64()).collect(),
                            fell_back: false,
                        };
                        Ok((r.model, ev))
                    }
                    Err(Error::Diverged { .. }) => {
                        let losses = crate::adaptation::embedding_losses(theta, table, &data)?;
                        let idx = crate::adaptation::argmin_lowest_index(&losses).expect("rows");
                        let h = table.get(idx).expect("row").clone();
                        let ev = AdaptationEvent {
                            step,
                            selected_index: idx,
                            pre_loss: losses[idx].as_f64(),
                            post_loss: losses[idx].as_f64(),
                            embedding_losses: losses.iter().map(|l| l.as_f64()).collect(),
                            fell_back: true,
                        };
                        let mut m = AdaptedModel::unadapted(theta.clone(), h, idx);
                        m.window_size_at_adaptation = data.len();
                        Ok((m, ev))
                    }
                    Err(e) => Err(e),
                }
            }
            ControlPrior::Scratch { init } => {
                let current = self.scratch_theta.get_or_insert_with(|| init.clone());
                let h = Embedding::empty();
                let pre = nll_loss(current, &h, &self.history)?;
                let (next, fell_back) = match inner_update(current, &h, &self.history, &cfg.inner, rng) {
                    Ok((p, _)) => (p, false),
                    Err(Error::Diverged { .. }) => (current.clone(), true),
                    Err(e) => return Err(e),
                };
                *current = next;
                let post = nll_loss(current, &h, &self.history)?;
                let ev = AdaptationEvent {
                    step,
                    selected_index: 0,
                    pre_loss: pre.as_f64(),
                    post_loss: post.as_f64(),
                    embedding_losses: vec![pre.as_f64()],
                    fell_back,
                };
                let mut m = AdaptedModel::unadapted(current.clone(), h, 0);
                m.window_size_at_adaptation = self.history.len();
                Ok((m, ev))
            }
        }
    }
}

/// Runs one control episode from the environment's rest state.
///
/// The first `K` steps take uniformly random actions to fill the window.
/// From then on the model is re-adapted every `K` steps and each action is
/// the first action of the planner's best trajectory; a planning failure
/// falls back to a random action. Every real transition enters the window.
pub fn run_episode<T: Scalar, R: Reward<T> + ?Sized>(
    spec: &SituationSpec,
    prior: &ControlPrior<T>,
    reward: &R,
    cfg: &EpisodeConfig,
) -> Result<EpisodeLog> {
    cfg.mpc.validate()?;
    cfg.adaptation.validate()?;
    if cfg.mpc.action_dim() != spec.action_dim() {
        return Err(Error::Config("planner action bounds do not match environment".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    rng.set_stream(3);
    let mut window = ObservationWindow::new(cfg.adaptation.window)?;
    let mut ctrl = Controller {
        prior: prior.clone(),
        scratch_theta: None,
        history: TransitionDataset::default(),
    };
    let mut model: Option<AdaptedModel<T>> = None;
    let mut log = EpisodeLog::default();
    let mut state: Vec<T> = spec.initial_state();
    let k = cfg.adaptation.every;

    for step in 0..cfg.episode_length {
        let wrap = |e: Error| Error::Episode {
            step,
            source: Box::new(e),
        };
        if step >= k && step % k == 0 {
            let (m, ev) = ctrl.adapt(&window, &cfg.adaptation, step, &mut rng).map_err(wrap)?;
            model = Some(m);
            log.adaptations.push(ev);
        }
        let (action, planned) = match &model {
            None => (random_action(&cfg.mpc, &mut rng), false),
            Some(m) => {
                let mpc = cfg.mpc.clone().with_seed(step_seed(cfg.mpc.rng_seed ^ cfg.rng_seed, step));
                match plan(m, reward, &state, &mpc) {
                    Ok(a) => (a, true),
                    Err(Error::PlanningFailed { .. }) => (random_action(&cfg.mpc, &mut rng), false),
                    Err(e) => return Err(wrap(e)),
                }
            }
        };
        let next = spec.step(&state, &action).map_err(wrap)?;
        let r = reward.reward(&state, &action, &next);
        let t = Transition::new(state.clone(), action.clone(), next.clone());
        window.push(t.clone());
        if matches!(ctrl.prior, ControlPrior::Scratch { .. }) {
            ctrl.history.push(t);
        }
        log.steps.push(StepRecord {
            step,
            state: state.iter().map(|v| v.as_f64()).collect(),
            action: action.iter().map(|v| v.as_f64()).collect(),
            reward: r.as_f64(),
            selected_index: model.as_ref().map(|m| m.source_index),
            planned,
        });
        state = next;
    }
    Ok(log)
}
