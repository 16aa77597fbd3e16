//! Analytic situation-parameterized environments and random-action data
//! collection.
//!
//! Three families:
//! - `sine`: regression cast as zero-action dynamics, `x -> A sin(f x + φ)`.
//! - `arm`: planar velocity-controlled arm with unit links and per-joint
//!   damage (weakened, reversed, blocked). State is the joint angles followed
//!   by the end-effector position.
//! - `point_mass`: 2-D point mass with a friction multiplier. State is
//!   position followed by velocity.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Transition, TransitionDataset};
use crate::error::{Error, Result};
use crate::mpc::Reward;
use crate::scalar::{all_finite, Scalar};

/// Integration step of the arm and point-mass environments, in seconds.
pub const DT: f64 = 0.1;
/// Base viscous friction coefficient of the point mass.
pub const POINT_MASS_MU: f64 = 0.5;
/// Point-mass goal position.
pub const POINT_MASS_GOAL: [f64; 2] = [2.0, 0.0];
/// Collection episodes reset to a random state after this many steps.
pub const EPISODE_RESET: usize = 50;

pub const SINE_X_RANGE: (f64, f64) = (-5.0, 5.0);
pub const SINE_AMPLITUDE: (f64, f64) = (0.5, 2.0);
pub const SINE_PHASE: (f64, f64) = (0.0, PI);
pub const SINE_FREQUENCY: (f64, f64) = (0.5, 2.0);
pub const FRICTION_RANGE: (f64, f64) = (0.25, 4.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Family {
    Sine,
    Arm { joints: usize },
    PointMass,
}

impl Family {
    pub fn state_dim(self) -> usize {
        match self {
            Family::Sine => 1,
            Family::Arm { joints } => joints + 2,
            Family::PointMass => 4,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            Family::Sine => 0,
            Family::Arm { joints } => joints,
            Family::PointMass => 2,
        }
    }

    /// Elementwise `(low, high)` action bounds.
    pub fn action_bounds(self) -> (Vec<f64>, Vec<f64>) {
        let d = self.action_dim();
        (vec![-1.0; d], vec![1.0; d])
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Family::Arm { joints: 0 } => {
                Err(Error::Config("arm needs at least one joint".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DamageTag {
    Healthy,
    Weakened,
    Reversed,
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JointDamage {
    Healthy,
    Weakened { gain: f64 },
    Reversed,
    Blocked,
}

impl JointDamage {
    /// Multiplier applied to the commanded joint velocity.
    pub fn gain(self) -> f64 {
        match self {
            JointDamage::Healthy => 1.0,
            JointDamage::Weakened { gain } => gain,
            JointDamage::Reversed => -1.0,
            JointDamage::Blocked => 0.0,
        }
    }

    pub fn tag(self) -> DamageTag {
        match self {
            JointDamage::Healthy => DamageTag::Healthy,
            JointDamage::Weakened { .. } => DamageTag::Weakened,
            JointDamage::Reversed => DamageTag::Reversed,
            JointDamage::Blocked => DamageTag::Blocked,
        }
    }
}

/// A concrete sampled situation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum SituationSpec {
    Sine {
        amplitude: f64,
        phase: f64,
        frequency: f64,
    },
    Arm {
        joints: Vec<JointDamage>,
    },
    PointMass {
        friction: f64,
    },
}

fn in_range(v: f64, (lo, hi): (f64, f64)) -> bool {
    v.is_finite() && v >= lo && v <= hi
}

impl SituationSpec {
    pub fn family(&self) -> Family {
        match self {
            SituationSpec::Sine { .. } => Family::Sine,
            SituationSpec::Arm { joints } => Family::Arm {
                joints: joints.len(),
            },
            SituationSpec::PointMass { .. } => Family::PointMass,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.family().state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.family().action_dim()
    }

    /// Damage tags per joint; empty for non-arm families.
    pub fn damage_tags(&self) -> Vec<DamageTag> {
        match self {
            SituationSpec::Arm { joints } => joints.iter().map(|j| j.tag()).collect(),
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SituationSpec::Sine {
                amplitude,
                phase,
                frequency,
            } => {
                if in_range(*amplitude, SINE_AMPLITUDE)
                    && in_range(*phase, SINE_PHASE)
                    && in_range(*frequency, SINE_FREQUENCY)
                {
                    Ok(())
                } else {
                    Err(Error::Config(format!("sine parameters out of range: {self:?}")))
                }
            }
            SituationSpec::Arm { joints } => {
                if joints.is_empty() {
                    return Err(Error::Config("arm needs at least one joint".into()));
                }
                let blocked = joints.iter().filter(|j| j.tag() == DamageTag::Blocked).count();
                if blocked >= joints.len() {
                    return Err(Error::Config("every arm joint is blocked".into()));
                }
                for j in joints {
                    if let JointDamage::Weakened { gain } = j {
                        if !(gain.is_finite() && *gain > 0.0 && *gain < 1.0) {
                            return Err(Error::Config(format!("weakened gain {gain} not in (0, 1)")));
                        }
                    }
                }
                Ok(())
            }
            SituationSpec::PointMass { friction } => {
                if in_range(*friction, FRICTION_RANGE) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("friction multiplier {friction} out of range")))
                }
            }
        }
    }

    /// Ground-truth transition; actions outside the bounds are clipped.
    pub fn step<T: Scalar>(&self, state: &[T], action: &[T]) -> Result<Vec<T>> {
        if state.len() != self.state_dim() || action.len() != self.action_dim() {
            return Err(Error::Config(format!(
                "step got dims (s={}, a={}), expected (s={}, a={})",
                state.len(),
                action.len(),
                self.state_dim(),
                self.action_dim()
            )));
        }
        if !(all_finite(state) && all_finite(action)) {
            return Err(Error::Input("non-finite state or action".into()));
        }
        let clip = |a: T| a.max(-T::one()).min(T::one());
        let dt = T::of(DT);
        Ok(match self {
            SituationSpec::Sine {
                amplitude,
                phase,
                frequency,
            } => vec![T::of(*amplitude) * (T::of(*frequency) * state[0] + T::of(*phase)).sin()],
            SituationSpec::Arm { joints } => {
                let n = joints.len();
                let angles: Vec<T> = (0..n)
                    .map(|j| wrap_angle(state[j] + T::of(joints[j].gain()) * clip(action[j]) * dt))
                    .collect();
                arm_state(&angles)
            }
            SituationSpec::PointMass { friction } => {
                let decay = T::one() - T::of(POINT_MASS_MU * friction) * dt;
                let vx = decay * state[2] + clip(action[0]) * dt;
                let vy = decay * state[3] + clip(action[1]) * dt;
                vec![state[0] + vx * dt, state[1] + vy * dt, vx, vy]
            }
        })
    }

    /// Uniformly random state used for collection resets.
    pub fn random_state<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<T> {
        match self {
            SituationSpec::Sine { .. } => {
                vec![T::of(rng.random_range(SINE_X_RANGE.0..=SINE_X_RANGE.1))]
            }
            SituationSpec::Arm { joints } => {
                let angles: Vec<T> = joints
                    .iter()
                    .map(|_| wrap_angle(T::of(rng.random_range(-PI..=PI))))
                    .collect();
                arm_state(&angles)
            }
            SituationSpec::PointMass { .. } => vec![
                T::of(rng.random_range(-3.0..=3.0)),
                T::of(rng.random_range(-3.0..=3.0)),
                T::of(rng.random_range(-1.0..=1.0)),
                T::of(rng.random_range(-1.0..=1.0)),
            ],
        }
    }

    /// Rest state where control episodes start: arm stretched along +x,
    /// point mass at the origin at rest.
    pub fn initial_state<T: Scalar>(&self) -> Vec<T> {
        match self {
            SituationSpec::Sine { .. } => vec![T::zero()],
            SituationSpec::Arm { joints } => arm_state(&vec![T::zero(); joints.len()]),
            SituationSpec::PointMass { .. } => vec![T::zero(); 4],
        }
    }
}

/// Wraps an angle into `(-π, π]`; angles already in range are returned as is.
pub fn wrap_angle<T: Scalar>(theta: T) -> T {
    let pi = T::of(PI);
    if theta > -pi && theta <= pi {
        return theta;
    }
    let two_pi = T::of(2.0 * PI);
    let mut y = theta % two_pi;
    if y <= -pi {
        y += two_pi;
    } else if y > pi {
        y -= two_pi;
    }
    y
}

/// Planar forward kinematics with unit link lengths.
pub fn end_effector<T: Scalar>(angles: &[T]) -> [T; 2] {
    let mut cum = T::zero();
    let mut p = [T::zero(), T::zero()];
    for &a in angles {
        cum += a;
        p[0] += cum.cos();
        p[1] += cum.sin();
    }
    p
}

fn arm_state<T: Scalar>(angles: &[T]) -> Vec<T> {
    let ee = end_effector(angles);
    let mut s = angles.to_vec();
    s.extend_from_slice(&ee);
    s
}

/// Fixed reaching goal of an `n`-link arm: `0.8 n (1/√2, 1/√2)`.
pub fn arm_goal(joints: usize) -> [f64; 2] {
    let r = 0.8 * joints as f64 * FRAC_1_SQRT_2;
    [r, r]
}

/// Samples a situation uniformly from the family's declared ranges.
///
/// Arm joints are healthy with probability 0.5, otherwise uniformly one of
/// the three damages; tuples with every joint blocked are resampled.
pub fn sample_situation<R: Rng + ?Sized>(family: Family, rng: &mut R) -> SituationSpec {
    match family {
        Family::Sine => SituationSpec::Sine {
            amplitude: rng.random_range(SINE_AMPLITUDE.0..=SINE_AMPLITUDE.1),
            phase: rng.random_range(SINE_PHASE.0..=SINE_PHASE.1),
            frequency: rng.random_range(SINE_FREQUENCY.0..=SINE_FREQUENCY.1),
        },
        Family::Arm { joints } => loop {
            let damages: Vec<JointDamage> = (0..joints).map(|_| sample_damage(rng)).collect();
            let blocked = damages.iter().filter(|d| d.tag() == DamageTag::Blocked).count();
            if blocked < joints {
                break SituationSpec::Arm { joints: damages };
            }
        },
        Family::PointMass => SituationSpec::PointMass {
            friction: rng.random_range(FRICTION_RANGE.0..=FRICTION_RANGE.1),
        },
    }
}

fn sample_damage<R: Rng + ?Sized>(rng: &mut R) -> JointDamage {
    if rng.random_bool(0.5) {
        return JointDamage::Healthy;
    }
    match rng.random_range(0..3) {
        0 => {
            let mut gain = 0.0;
            while gain <= 0.0 {
                gain = rng.random_range(0.0..1.0);
            }
            JointDamage::Weakened { gain }
        }
        1 => JointDamage::Reversed,
        _ => JointDamage::Blocked,
    }
}

/// Free-function form of [`SituationSpec::step`].
pub fn step<T: Scalar>(spec: &SituationSpec, state: &[T], action: &[T]) -> Result<Vec<T>> {
    spec.step(state, action)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionConfig {
    pub n_transitions: usize,
    pub rng_seed: u64,
}

impl CollectionConfig {
    pub fn new(n_transitions: usize, rng_seed: u64) -> Self {
        Self {
            n_transitions,
            rng_seed,
        }
    }
}

/// Collects `n` transitions under uniformly random actions.
///
/// Arm and point-mass episodes restart from a random state every
/// [`EPISODE_RESET`] steps. Arm transitions that cross the `±π` seam are
/// dropped (and the episode restarted): their raw `s' - s` is a `2π` artifact
/// of the angle wrapping rather than dynamics. Sine inputs are uniform on
/// `[-5, 5]`.
pub fn collect_random_dataset<T: Scalar>(
    spec: &SituationSpec,
    cfg: &CollectionConfig,
) -> Result<TransitionDataset<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let family = spec.family();
    let (lo, hi) = family.action_bounds();
    let mut out = TransitionDataset::new(Vec::with_capacity(cfg.n_transitions));
    let mut state: Vec<T> = spec.random_state(&mut rng);
    let mut since_reset = 0;
    while out.len() < cfg.n_transitions {
        if family == Family::Sine {
            let s: Vec<T> = spec.random_state(&mut rng);
            let ns = spec.step(&s, &[])?;
            out.push(Transition::new(s, Vec::new(), ns));
            continue;
        }
        if since_reset == EPISODE_RESET {
            state = spec.random_state(&mut rng);
            since_reset = 0;
        }
        let action: Vec<T> = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| T::of(rng.random_range(l..=h)))
            .collect();
        let next = spec.step(&state, &action)?;
        since_reset += 1;
        if let Family::Arm { joints } = family {
            let pi = T::of(PI);
            if (0..joints).any(|j| (next[j] - state[j]).abs() > pi) {
                state = spec.random_state(&mut rng);
                since_reset = 0;
                continue;
            }
        }
        out.push(Transition::new(state, action, next.clone()));
        state = next;
    }
    Ok(out)
}

/// Task reward of a transition. Arm: negative end-effector distance to
/// [`arm_goal`]; point mass: negative distance to [`POINT_MASS_GOAL`]. Both
/// are measured at `next_state`. The sine family has no reward.
pub fn reward<T: Scalar>(family: Family, state: &[T], action: &[T], next_state: &[T]) -> Result<T> {
    let r = TaskReward::for_family(family)?;
    if next_state.len() != family.state_dim() {
        return Err(Error::Config("reward state dims mismatch".into()));
    }
    Ok(r.reward(state, action, next_state))
}

/// Reward of a control task, usable by the planner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskReward {
    ArmReach { joints: usize },
    PointMassGoal,
}

impl TaskReward {
    pub fn for_family(family: Family) -> Result<Self> {
        match family {
            Family::Sine => Err(Error::Usage("the sine family has no reward".into())),
            Family::Arm { joints } => Ok(TaskReward::ArmReach { joints }),
            Family::PointMass => Ok(TaskReward::PointMassGoal),
        }
    }

    fn goal(self) -> ([f64; 2], usize) {
        match self {
            TaskReward::ArmReach { joints } => (arm_goal(joints), joints),
            TaskReward::PointMassGoal => (POINT_MASS_GOAL, 0),
        }
    }
}

impl<T: Scalar> Reward<T> for TaskReward {
    fn reward(&self, _state: &[T], _action: &[T], next_state: &[T]) -> T {
        let (goal, off) = self.goal();
        let dx = next_state[off] - T::of(goal[0]);
        let dy = next_state[off + 1] - T::of(goal[1]);
        -(dx * dx + dy * dy).sqrt()
    }
}
