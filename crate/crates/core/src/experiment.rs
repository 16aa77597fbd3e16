//! Experiment driver: corpus collection, meta-training, FAMLE vs. baseline
//! control comparisons and the sine few-shot figure.
//!
//! Every random choice is derived from the master seed (or the replicate
//! seeds for control runs) through [`derive_seed`], so all emitted files are
//! a pure function of the configuration. The `rng_seed` fields of the nested
//! sections are overwritten with derived seeds.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_detailed, AdaptationConfig};
use crate::checkpoint::Checkpoint;
use crate::data::{format_real, Transition, TransitionDataset};
use crate::episode::{run_episode, ControlPrior, EpisodeConfig, EpisodeLog};
use crate::error::{Error, Result};
use crate::meta::{
    famle_meta_train, maml_fo_train, reptile_train, write_log_csv, LogEntry, MetaConfig,
    MetaCorpus, MetaResult, Method,
};
use crate::model::{inner_update, Architecture, Embedding, ModelParams};
use crate::mpc::MpcConfig;
use crate::situations::{
    collect_random_dataset, sample_situation, CollectionConfig, DamageTag, Family, SituationSpec,
    TaskReward, SINE_X_RANGE,
};

/// Seed domains for [`derive_seed`].
pub mod domain {
    pub const SITUATIONS: u64 = 1;
    pub const COLLECTION: u64 = 2;
    pub const HELD_OUT: u64 = 3;
    pub const META: u64 = 4;
    pub const EPISODE: u64 = 5;
    pub const SCRATCH_INIT: u64 = 6;
    pub const SINE_POINTS: u64 = 7;
    pub const SINE_ADAPT: u64 = 8;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-seed for `(base, domain, index)`.
pub fn derive_seed(base: u64, domain: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(base) ^ domain) ^ index)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 8,
            hidden: vec![64, 64],
        }
    }
}

/// Planner settings; the action bounds come from the family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub horizon: usize,
    pub n_candidates: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        let d = MpcConfig::default();
        Self {
            horizon: d.horizon,
            n_candidates: d.n_candidates,
        }
    }
}

/// Rates for first-order MAML, whose outer step is a gradient step rather
/// than an interpolation. Unset fields fall back to `[meta]` and
/// `[meta.inner]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MamlRates {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_meta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_meta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SineFigConfig {
    /// Adaptation set sizes.
    pub points: Vec<usize>,
    /// Evaluation grid size over `[-5, 5]`.
    pub grid_points: usize,
}

impl Default for SineFigConfig {
    fn default() -> Self {
        Self {
            points: vec![0, 2, 3, 4, 5],
            grid_points: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub family: Family,
    /// Number of meta-training situations N.
    pub n_situations: usize,
    /// Transitions collected per situation.
    pub n_transitions: usize,
    /// Master seed for collection, held-out sampling and meta-training.
    pub seed: u64,
    /// Replicate seeds for control runs.
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub meta: MetaConfig,
    pub maml: MamlRates,
    pub adaptation: AdaptationConfig,
    pub planner: PlannerConfig,
    pub episode_length: usize,
    /// Reward above which the goal counts as reached.
    pub goal_threshold: f64,
    /// Methods compared by `run`.
    pub methods: Vec<Method>,
    pub sinefig: SineFigConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            family: Family::Arm { joints: 2 },
            n_situations: 11,
            n_transitions: 2000,
            seed: 0,
            seeds: (0..10).collect(),
            out_dir: None,
            model: ModelConfig::default(),
            meta: MetaConfig::default(),
            maml: MamlRates::default(),
            adaptation: AdaptationConfig::default(),
            planner: PlannerConfig::default(),
            episode_length: 300,
            goal_threshold: -0.1,
            methods: vec![Method::Famle, Method::Maml, Method::Scratch],
            sinefig: SineFigConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.n_situations == 0 {
            return Err(Error::Config("n_situations must be >= 1".into()));
        }
        if self.n_transitions == 0 {
            return Err(Error::Config("n_transitions must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        let unique: HashSet<_> = self.methods.iter().collect();
        if unique.len() != self.methods.len() {
            return Err(Error::Config("methods must not repeat".into()));
        }
        if self.sinefig.grid_points < 2 {
            return Err(Error::Config("sinefig.grid_points must be >= 2".into()));
        }
        if !self.goal_threshold.is_finite() {
            return Err(Error::Config("goal_threshold must be finite".into()));
        }
        self.architecture().validate()?;
        self.meta_config_for(Method::Maml).validate()?;
        self.meta.validate()?;
        self.adaptation.validate()?;
        self.mpc_config().validate()?;
        Ok(())
    }

    /// Architecture of the embedding-conditioned model.
    pub fn architecture(&self) -> Architecture {
        Architecture::new(
            self.family.state_dim(),
            self.family.action_dim(),
            self.model.embed_dim,
            self.model.hidden.clone(),
        )
    }

    /// Architecture used by `method`; single-prior methods take no embedding.
    pub fn architecture_for(&self, method: Method) -> Architecture {
        match method {
            Method::Famle => self.architecture(),
            _ => self.architecture().without_embedding(),
        }
    }

    pub fn mpc_config(&self) -> MpcConfig {
        let (lo, hi) = self.family.action_bounds();
        MpcConfig {
            horizon: self.planner.horizon,
            n_candidates: self.planner.n_candidates,
            ..MpcConfig::default()
        }
        .with_bounds(lo, hi)
    }

    pub fn episode_config(&self, rng_seed: u64) -> EpisodeConfig {
        EpisodeConfig {
            episode_length: self.episode_length,
            adaptation: self.adaptation.clone(),
            mpc: self.mpc_config().with_seed(derive_seed(rng_seed, domain::EPISODE, 1)),
            rng_seed: derive_seed(rng_seed, domain::EPISODE, 0),
        }
    }

    pub fn meta_config(&self) -> MetaConfig {
        MetaConfig {
            rng_seed: derive_seed(self.seed, domain::META, 0),
            ..self.meta.clone()
        }
    }

    pub fn meta_config_for(&self, method: Method) -> MetaConfig {
        let mut m = self.meta_config();
        if method == Method::Maml {
            m.alpha_meta = self.maml.alpha_meta.unwrap_or(m.alpha_meta);
            m.beta_meta = self.maml.beta_meta.unwrap_or(m.beta_meta);
            m.inner.alpha = self.maml.inner_alpha.unwrap_or(m.inner.alpha);
            m.inner.beta = self.maml.inner_beta.unwrap_or(m.inner.beta);
        }
        m
    }
}

fn tag_key(spec: &SituationSpec) -> Option<Vec<DamageTag>> {
    match spec {
        SituationSpec::Arm { .. } => Some(spec.damage_tags()),
        _ => None,
    }
}

fn collides(spec: &SituationSpec, taken: &[SituationSpec]) -> bool {
    match tag_key(spec) {
        Some(k) => taken.iter().any(|t| tag_key(t).as_ref() == Some(&k)),
        None => taken.contains(spec),
    }
}

const MAX_RESAMPLES: usize = 10_000;

/// Samples `n` situations; arm situations get distinct damage-tag tuples.
pub fn sample_corpus_specs(family: Family, n: usize, seed: u64) -> Result<Vec<SituationSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain::SITUATIONS, 0));
    let mut specs = Vec::with_capacity(n);
    while specs.len() < n {
        let mut tries = 0;
        let spec = loop {
            let s = sample_situation(family, &mut rng);
            if !collides(&s, &specs) {
                break s;
            }
            tries += 1;
            if tries == MAX_RESAMPLES {
                return Err(Error::Config(format!(
                    "cannot sample {n} distinct situations of {family:?}"
                )));
            }
        };
        specs.push(spec);
    }
    Ok(specs)
}

/// A situation of the family that is not in `corpus`; for the arm, its
/// damage-tag tuple differs from every corpus situation.
pub fn held_out_situation(
    family: Family,
    corpus: &[SituationSpec],
    seed: u64,
) -> Result<SituationSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain::HELD_OUT, 0));
    for _ in 0..MAX_RESAMPLES {
        let s = sample_situation(family, &mut rng);
        if !collides(&s, corpus) {
            return Ok(s);
        }
    }
    Err(Error::Config("no held-out situation distinct from the corpus".into()))
}

/// Samples the corpus situations and collects random-action data for each.
pub fn collect_corpus(cfg: &ExperimentConfig) -> Result<MetaCorpus<f64>> {
    cfg.validate()?;
    let specs = sample_corpus_specs(cfg.family, cfg.n_situations, cfg.seed)?;
    let datasets = specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let seed = derive_seed(cfg.seed, domain::COLLECTION, i as u64);
            collect_random_dataset(s, &CollectionConfig::new(cfg.n_transitions, seed))
        })
        .collect::<Result<Vec<_>>>()?;
    MetaCorpus::new(datasets, specs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    index: usize,
    n_transitions: usize,
    spec: SituationSpec,
}

fn stem(i: usize) -> String {
    format!("situation_{i:03}")
}

/// Writes `situation_XXX.csv` and its `situation_XXX.json` spec sidecar per
/// situation.
pub fn write_corpus(dir: &Path, corpus: &MetaCorpus<f64>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, (d, s)) in corpus.datasets.iter().zip(&corpus.specs).enumerate() {
        d.write_csv(&dir.join(format!("{}.csv", stem(i))))?;
        let side = Sidecar {
            index: i,
            n_transitions: d.len(),
            spec: s.clone(),
        };
        std::fs::write(
            dir.join(format!("{}.json", stem(i))),
            serde_json::to_string_pretty(&side)?,
        )?;
    }
    Ok(())
}

/// Situation specs of a corpus directory, in index order.
pub fn read_corpus_specs(dir: &Path) -> Result<Vec<SituationSpec>> {
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("corpus directory {} not found", dir.display()),
        )));
    }
    let mut specs = Vec::new();
    loop {
        let path = dir.join(format!("{}.json", stem(specs.len())));
        if !path.exists() {
            break;
        }
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        if side.index != specs.len() {
            return Err(Error::Format(format!("{} has index {}", path.display(), side.index)));
        }
        side.spec.validate()?;
        specs.push(side.spec);
    }
    if specs.is_empty() {
        return Err(Error::Input(format!("no situation files in {}", dir.display())));
    }
    Ok(specs)
}

pub fn read_corpus(dir: &Path) -> Result<MetaCorpus<f64>> {
    let specs = read_corpus_specs(dir)?;
    let datasets = (0..specs.len())
        .map(|i| TransitionDataset::read_csv(&dir.join(format!("{}.csv", stem(i)))))
        .collect::<Result<Vec<_>>>()?;
    MetaCorpus::new(datasets, specs)
}

/// Meta-trains `method` on the corpus. FAMLE gets one embedding per
/// situation; Reptile and first-order MAML a single prior without embedding.
pub fn metatrain(
    cfg: &ExperimentConfig,
    corpus: &MetaCorpus<f64>,
    method: Method,
) -> Result<MetaResult<f64>> {
    cfg.validate()?;
    let arch = cfg.architecture_for(method);
    let meta = cfg.meta_config_for(method);
    match method {
        Method::Famle => famle_meta_train(corpus, &arch, &meta),
        Method::Maml => maml_fo_train(corpus, &arch, &meta),
        Method::Reptile => reptile_train(corpus, &arch, &meta),
        Method::Scratch => Err(Error::Usage("scratch has no meta-training".into())),
    }
}

/// Writes `<method>.json` (checkpoint) and `<method>_log.csv`.
pub fn write_training_output(dir: &Path, method: Method, result: &MetaResult<f64>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{method}.json"));
    Checkpoint::from_result(method, result).save(&path)?;
    write_log_csv(&result.training_log, &dir.join(format!("{method}_log.csv")))?;
    Ok(path)
}

/// Mean `loss_after` over the first and the last `window` log entries.
pub fn log_loss_trend(log: &[LogEntry], window: usize) -> Option<(f64, f64)> {
    let w = window.min(log.len());
    if w == 0 {
        return None;
    }
    let mean = |es: &[LogEntry]| es.iter().map(|e| e.loss_after).sum::<f64>() / es.len() as f64;
    Some((mean(&log[..w]), mean(&log[log.len() - w..])))
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Control prior for `method`. Scratch starts from a seeded random network
/// using `normalizer_source`'s input normalization when given.
pub fn control_prior(
    cfg: &ExperimentConfig,
    method: Method,
    checkpoint: Option<&Checkpoint<f64>>,
    normalizer_source: Option<&Checkpoint<f64>>,
    replicate_seed: u64,
) -> Result<ControlPrior<f64>> {
    match method {
        Method::Scratch => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(replicate_seed, domain::SCRATCH_INIT, 0));
            let mut init = ModelParams::init(&cfg.architecture_for(Method::Scratch), &mut rng);
            if let Some(src) = normalizer_source {
                init = init.with_normalizer(src.theta.norm.clone());
            }
            Ok(ControlPrior::Scratch { init })
        }
        _ => {
            let c = checkpoint
                .ok_or_else(|| Error::Usage(format!("method {method} needs a checkpoint")))?;
            let arch = &c.theta.arch;
            if arch.state_dim != cfg.family.state_dim() || arch.action_dim != cfg.family.action_dim() {
                return Err(Error::Config(format!("{method} checkpoint dims do not match the family")));
            }
            Ok(ControlPrior::Meta {
                theta: c.theta.clone(),
                table: c.table.clone(),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub method: Method,
    pub step: usize,
    pub reward_q25: f64,
    pub reward_median: f64,
    pub reward_q75: f64,
    pub cumulative_q25: f64,
    pub cumulative_median: f64,
    pub cumulative_q75: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodRuns {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub logs: Vec<EpisodeLog>,
}

impl MethodRuns {
    pub fn cumulative_rewards(&self) -> Vec<f64> {
        self.logs.iter().map(|l| l.cumulative_reward()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub held_out: SituationSpec,
    pub episode_length: usize,
    pub goal_threshold: f64,
    pub runs: Vec<MethodRuns>,
    pub aggregate: Vec<AggregateRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MethodSummary {
    method: Method,
    seeds: Vec<u64>,
    cumulative_rewards: Vec<f64>,
    median_cumulative_reward: f64,
    q25_cumulative_reward: f64,
    q75_cumulative_reward: f64,
    steps_to_goal: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ComparisonSummary {
    held_out: SituationSpec,
    episode_length: usize,
    goal_threshold: f64,
    methods: Vec<MethodSummary>,
}

/// Per-step quartiles of reward and cumulative reward across replicates.
pub fn aggregate(runs: &MethodRuns, episode_length: usize) -> Vec<AggregateRow> {
    let rewards: Vec<Vec<f64>> = runs.logs.iter().map(|l| l.rewards()).collect();
    let cumulative: Vec<Vec<f64>> = runs.logs.iter().map(|l| l.cumulative_rewards()).collect();
    (0..episode_length)
        .map(|t| {
            let r: Vec<f64> = rewards.iter().map(|c| c[t]).collect();
            let c: Vec<f64> = cumulative.iter().map(|c| c[t]).collect();
            AggregateRow {
                method: runs.method,
                step: t,
                reward_q25: quantile(&r, 0.25),
                reward_median: quantile(&r, 0.5),
                reward_q75: quantile(&r, 0.75),
                cumulative_q25: quantile(&c, 0.25),
                cumulative_median: quantile(&c, 0.5),
                cumulative_q75: quantile(&c, 0.75),
            }
        })
        .collect()
}

/// Runs every `(method, replicate seed)` episode on `held_out`. Replicates
/// share their episode seed across methods, so cold-start actions match.
pub fn run_comparison(
    cfg: &ExperimentConfig,
    priors: &[(Method, ControlPrior<f64>)],
    held_out: &SituationSpec,
) -> Result<ComparisonReport> {
    cfg.validate()?;
    if held_out.family() != cfg.family {
        return Err(Error::Config("held-out situation is not of the configured family".into()));
    }
    let reward = TaskReward::for_family(cfg.family)?;
    let jobs: Vec<(usize, u64)> = (0..priors.len())
        .flat_map(|m| cfg.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let logs = jobs
        .par_iter()
        .map(|&(m, s)| run_episode(held_out, &priors[m].1, &reward, &cfg.episode_config(s)))
        .collect::<Result<Vec<_>>>()?;
    let mut logs = logs.into_iter();
    let runs: Vec<MethodRuns> = priors
        .iter()
        .map(|(method, _)| MethodRuns {
            method: *method,
            seeds: cfg.seeds.clone(),
            logs: logs.by_ref().take(cfg.seeds.len()).collect(),
        })
        .collect();
    let aggregate = runs
        .iter()
        .flat_map(|r| aggregate(r, cfg.episode_length))
        .collect();
    Ok(ComparisonReport {
        held_out: held_out.clone(),
        episode_length: cfg.episode_length,
        goal_threshold: cfg.goal_threshold,
        runs,
        aggregate,
    })
}

impl ComparisonReport {
    pub fn median_cumulative(&self, method: Method) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.method == method)
            .map(|r| median(&r.cumulative_rewards()))
    }

    /// Writes `held_out.json`, `summary.json`, `aggregate.csv` and per method
    /// `<method>/seed_<s>.csv` curves with `_adaptations.csv` and
    /// `_summary.json` companions.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("held_out.json"),
            serde_json::to_string_pretty(&self.held_out)?,
        )?;
        for run in &self.runs {
            let mdir = dir.join(run.method.name());
            std::fs::create_dir_all(&mdir)?;
            for (seed, log) in run.seeds.iter().zip(&run.logs) {
                log.write_csv(&mdir.join(format!("seed_{seed}.csv")))?;
                log.write_adaptations_csv(&mdir.join(format!("seed_{seed}_adaptations.csv")))?;
                std::fs::write(
                    mdir.join(format!("seed_{seed}_summary.json")),
                    serde_json::to_string_pretty(&log.summary(self.goal_threshold))?,
                )?;
            }
        }
        let mut w = csv::Writer::from_path(dir.join("aggregate.csv"))?;
        w.write_record([
            "method",
            "step",
            "reward_q25",
            "reward_median",
            "reward_q75",
            "cumulative_q25",
            "cumulative_median",
            "cumulative_q75",
        ])?;
        for r in &self.aggregate {
            w.write_record([
                r.method.name().to_string(),
                r.step.to_string(),
                format_real(r.reward_q25),
                format_real(r.reward_median),
                format_real(r.reward_q75),
                format_real(r.cumulative_q25),
                format_real(r.cumulative_median),
                format_real(r.cumulative_q75),
            ])?;
        }
        w.flush()?;
        let summary = ComparisonSummary {
            held_out: self.held_out.clone(),
            episode_length: self.episode_length,
            goal_threshold: self.goal_threshold,
            methods: self
                .runs
                .iter()
                .map(|r| {
                    let c = r.cumulative_rewards();
                    MethodSummary {
                        method: r.method,
                        seeds: r.seeds.clone(),
                        median_cumulative_reward: median(&c),
                        q25_cumulative_reward: quantile(&c, 0.25),
                        q75_cumulative_reward: quantile(&c, 0.75),
                        cumulative_rewards: c,
                        steps_to_goal: r
                            .logs
                            .iter()
                            .map(|l| l.summary(self.goal_threshold).steps_to_goal)
                            .collect(),
                    }
                })
                .collect(),
        };
        std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        Ok(())
    }
}

/// Fitted curves for one adaptation set size.
#[derive(Debug, Clone, PartialEq)]
pub struct SineCurves {
    pub points: usize,
    /// The adaptation inputs.
    pub xs: Vec<f64>,
    /// `(x, true f(x), FAMLE fit, MAML fit)` on the grid.
    pub rows: Vec<[f64; 4]>,
    pub famle_mse: f64,
    pub maml_mse: f64,
    /// Embedding row FAMLE adapted from; `None` without data.
    pub famle_selected: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SineFigReport {
    pub corpus: Vec<SituationSpec>,
    pub held_out: SituationSpec,
    pub curves: Vec<SineCurves>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SineMseRow {
    points: usize,
    famle_mse: f64,
    maml_mse: f64,
    famle_selected: Option<usize>,
}

/// `n` evenly spaced points covering `[lo, hi]` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

fn sine_prediction(theta: &ModelParams<f64>, h: &Embedding<f64>, x: f64) -> Result<f64> {
    Ok(theta.predict_next(&[x], &[], h)?[0])
}

fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64
}

/// Adapts both meta-trained sine models to `held_out` with each configured
/// number of points and evaluates them on the grid.
///
/// Without points FAMLE predicts with the mean embedding of its table and
/// MAML with its prior. With points FAMLE selects the most likely embedding
/// and fine-tunes; MAML fine-tunes its prior. Both use the adaptation inner
/// update.
pub fn sine_evaluate(
    cfg: &ExperimentConfig,
    famle: &MetaResult<f64>,
    maml: &MetaResult<f64>,
    held_out: &SituationSpec,
    seed: u64,
) -> Result<Vec<SineCurves>> {
    if held_out.family() != Family::Sine {
        return Err(Error::Config("sine evaluation needs a sine situation".into()));
    }
    let grid = linspace(SINE_X_RANGE.0, SINE_X_RANGE.1, cfg.sinefig.grid_points);
    let truth = grid
        .iter()
        .map(|&x| held_out.step(&[x], &[]).map(|v| v[0]))
        .collect::<Result<Vec<_>>>()?;
    let maml_h = maml.embedding_table.get(0).expect("row");
    let inner = &cfg.adaptation.inner;
    cfg.sinefig
        .points
        .iter()
        .map(|&p| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain::SINE_POINTS, p as u64));
            let xs: Vec<f64> = (0..p)
                .map(|_| rng.random_range(SINE_X_RANGE.0..=SINE_X_RANGE.1))
                .collect();
            let data = TransitionDataset::new(
                xs.iter()
                    .map(|&x| Ok(Transition::new(vec![x], Vec::new(), held_out.step(&[x], &[])?)))
                    .collect::<Result<Vec<_>>>()?,
            );
            let mut arng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain::SINE_ADAPT, p as u64));
            let (ft, fh, selected) = if p == 0 {
                (famle.theta_meta.clone(), famle.embedding_table.mean(), None)
            } else {
                let r = adapt_detailed(&famle.theta_meta, &famle.embedding_table, &data, inner, &mut arng)?;
                (r.model.theta_star, r.model.h_star, Some(r.model.source_index))
            };
            let (mt, mh) = if p == 0 {
                (maml.theta_meta.clone(), maml_h.clone())
            } else {
                inner_update(&maml.theta_meta, maml_h, &data, inner, &mut arng)?
            };
            let fp = grid
                .iter()
                .map(|&x| sine_prediction(&ft, &fh, x))
                .collect::<Result<Vec<_>>>()?;
            let mp = grid
                .iter()
                .map(|&x| sine_prediction(&mt, &mh, x))
                .collect::<Result<Vec<_>>>()?;
            Ok(SineCurves {
                points: p,
                famle_mse: mse(&fp, &truth),
                maml_mse: mse(&mp, &truth),
                rows: (0..grid.len()).map(|i| [grid[i], truth[i], fp[i], mp[i]]).collect(),
                xs,
                famle_selected: selected,
            })
        })
        .collect()
}

/// Meta-trains FAMLE and first-order MAML on a sine corpus and evaluates
/// both on a held-out sine.
pub fn sinefig(cfg: &ExperimentConfig) -> Result<SineFigReport> {
    if cfg.family != Family::Sine {
        return Err(Error::Config("sinefig needs family kind = \"sine\"".into()));
    }
    let corpus = collect_corpus(cfg)?;
    let held_out = held_out_situation(Family::Sine, &corpus.specs, cfg.seed)?;
    let (famle, maml) = rayon::join(
        || metatrain(cfg, &corpus, Method::Famle),
        || metatrain(cfg, &corpus, Method::Maml),
    );
    let curves = sine_evaluate(cfg, &famle?, &maml?, &held_out, cfg.seed)?;
    Ok(SineFigReport {
        corpus: corpus.specs,
        held_out,
        curves,
    })
}

impl SineFigReport {
    /// Writes `sine_grid_p<points>.csv` per set size, `sine_mse.csv` and
    /// `sinefig.json`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for c in &self.curves {
            let mut w = csv::Writer::from_path(dir.join(format!("sine_grid_p{}.csv", c.points)))?;
            w.write_record(["x", "true", "famle", "maml"])?;
            for r in &c.rows {
                w.write_record(r.iter().map(|v| format_real(*v)))?;
            }
            w.flush()?;
        }
        let rows: Vec<SineMseRow> = self
            .curves
            .iter()
            .map(|c| SineMseRow {
                points: c.points,
                famle_mse: c.famle_mse,
                maml_mse: c.maml_mse,
                famle_selected: c.famle_selected,
            })
            .collect();
        let mut w = csv::Writer::from_path(dir.join("sine_mse.csv"))?;
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let doc = serde_json::json!({
            "corpus": self.corpus,
            "held_out": self.held_out,
            "mse": rows,
        });
        std::fs::write(dir.join("sinefig.json"), serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }
}
