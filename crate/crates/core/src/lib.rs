//! Meta-learned, embedding-conditioned dynamics models for fast online
//! adaptation, with random-shooting model-predictive control.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below fix the scalar to `f64`, which the experiment driver uses.

pub mod adaptation;
pub mod checkpoint;
pub mod data;
pub mod episode;
pub mod error;
pub mod experiment;
pub mod meta;
pub mod model;
pub mod mpc;
pub mod scalar;
pub mod situations;

pub use adaptation::{
    adapt, adapt_detailed, select_embedding, window_push, AdaptationConfig, AdaptedModel,
    ObservationWindow,
};
pub use checkpoint::Checkpoint;
pub use data::{Transition, TransitionDataset};
pub use episode::{run_episode, ControlPrior, EpisodeConfig, EpisodeLog, EpisodeSummary};
pub use error::{Error, Result};
pub use model::{
    forward, grad, inner_update, loss_and_grad, nll_loss, Activation, Architecture, BatchSize,
    Embedding, EmbeddingTable, Gradient, InnerUpdateConfig, Layer, ModelParams, Normalizer,
    ParamGrad,
};
pub use meta::{
    famle_meta_train, maml_fo_train, reptile_train, LogEntry, MetaConfig, MetaCorpus, MetaResult,
    Method,
};
pub use mpc::{plan, rollout_score, ActionTrajectory, MpcConfig, Reward, RolloutScore};
pub use scalar::Scalar;
pub use situations::{
    collect_random_dataset, sample_situation, CollectionConfig, Family, JointDamage, SituationSpec,
    TaskReward,
};

pub type ModelParams64 = ModelParams<f64>;
pub type ModelParams32 = ModelParams<f32>;
pub type Embedding64 = Embedding<f64>;
pub type EmbeddingTable64 = EmbeddingTable<f64>;
pub type Transition64 = Transition<f64>;
pub type TransitionDataset64 = TransitionDataset<f64>;
pub type AdaptedModel64 = AdaptedModel<f64>;
pub type MetaResult64 = MetaResult<f64>;
