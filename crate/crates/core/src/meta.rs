//! Meta-training over a corpus of situations.
//!
//! [`famle_meta_train`] runs the joint Reptile-style outer loop over θ and one
//! embedding per situation. [`reptile_train`] and [`maml_fo_train`] are the
//! single-prior baselines; they share the inner update and the outer loop so
//! all three agree exactly in degenerate configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TransitionDataset;
use crate::error::{Error, Result};
use crate::model::{
    inner_update, loss_and_grad, nll_loss, Architecture, Embedding, EmbeddingTable,
    InnerUpdateConfig, ModelParams, Normalizer,
};
use crate::scalar::Scalar;
use crate::situations::SituationSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Outer rate for θ.
    pub alpha_meta: f64,
    /// Outer rate for the embeddings.
    pub beta_meta: f64,
    pub inner: InnerUpdateConfig,
    pub outer_iterations: usize,
    pub rng_seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            alpha_meta: 0.1,
            beta_meta: 0.1,
            inner: InnerUpdateConfig::default(),
            outer_iterations: 3000,
            rng_seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        if !(self.alpha_meta.is_finite() && self.alpha_meta > 0.0)
            || !(self.beta_meta.is_finite() && self.beta_meta > 0.0)
        {
            return Err(Error::Config("meta learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Which prior a model or control run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Embedding-conditioned multi-prior model.
    Famle,
    /// First-order MAML single prior.
    Maml,
    /// Reptile single prior.
    Reptile,
    /// No prior; learned online from scratch.
    Scratch,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Famle => "famle",
            Method::Maml => "maml",
            Method::Reptile => "reptile",
            Method::Scratch => "scratch",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "famle" => Ok(Method::Famle),
            "maml" => Ok(Method::Maml),
            "reptile" => Ok(Method::Reptile),
            "scratch" => Ok(Method::Scratch),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Per-situation datasets with the specs that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaCorpus<T> {
    pub datasets: Vec<TransitionDataset<T>>,
    pub specs: Vec<SituationSpec>,
}

impl<T: Scalar> MetaCorpus<T> {
    pub fn new(datasets: Vec<TransitionDataset<T>>, specs: Vec<SituationSpec>) -> Result<Self> {
        if datasets.is_empty() {
            return Err(Error::Config("corpus needs at least one situation".into()));
        }
        if datasets.len() != specs.len() {
            return Err(Error::Config(format!(
                "{} datasets but {} situation specs",
                datasets.len(),
                specs.len()
            )));
        }
        let (sd, ad) = (specs[0].state_dim(), specs[0].action_dim());
        for (i, (d, s)) in datasets.iter().zip(&specs).enumerate() {
            if d.is_empty() {
                return Err(Error::Config(format!("dataset {i} is empty")));
            }
            if s.state_dim() != sd || s.action_dim() != ad {
                return Err(Error::Config(format!("situation {i} has different dims")));
            }
            d.validate(sd, ad)?;
        }
        let datasets = datasets
            .into_iter()
            .enumerate()
            .map(|(i, d)| d.with_situation(i))
            .collect();
        Ok(Self { datasets, specs })
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    /// `(state_dim, action_dim)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.specs[0].state_dim(), self.specs[0].action_dim())
    }

    pub fn normalizer(&self) -> Normalizer<T> {
        let (sd, ad) = self.dims();
        Normalizer::fit(self.datasets.iter(), sd, ad)
    }

    fn check_arch(&self, arch: &Architecture) -> Result<()> {
        let (sd, ad) = self.dims();
        if arch.state_dim != sd || arch.action_dim != ad {
            return Err(Error::Config(format!(
                "model dims (s={}, a={}) do not match corpus (s={sd}, a={ad})",
                arch.state_dim, arch.action_dim
            )));
        }
        arch.validate()
    }
}

/// One outer iteration of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub situation_index: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// Meta-trained θ, embeddings and training log.
///
/// Single-prior baselines carry a one-entry table holding their shared
/// embedding (zero-dimensional when the model takes no embedding input).
#[derive(Debug, Clone, PartialEq)]
pub struct MetaResult<T> {
    pub theta_meta: ModelParams<T>,
    pub embedding_table: EmbeddingTable<T>,
    pub training_log: Vec<LogEntry>,
}

/// Writes the log as CSV: `iteration,situation_index,loss_before,loss_after`.
pub fn write_log_csv(log: &[LogEntry], path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_log_csv(path: &std::path::Path) -> Result<Vec<LogEntry>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|e| e.map_err(Error::from)).collect()
}

/// RNG used for parameter and embedding initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// RNG driving situation sampling and mini-batches in the outer loop.
pub fn loop_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// RNG used to split each dataset for first-order MAML.
pub fn split_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    rng
}

/// Random θ (with corpus normalization) and `n_embeddings` random embeddings.
pub fn initialize<T: Scalar>(
    corpus: &MetaCorpus<T>,
    arch: &Architecture,
    n_embeddings: usize,
    seed: u64,
) -> Result<(ModelParams<T>, EmbeddingTable<T>)> {
    corpus.check_arch(arch)?;
    let mut rng = init_rng(seed);
    let theta = ModelParams::init(arch, &mut rng).with_normalizer(corpus.normalizer());
    let table = EmbeddingTable::init(n_embeddings, arch.embed_dim, &mut rng)?;
    Ok((theta, table))
}

/// Called after every outer iteration with the iteration index and state.
pub type Observer<'a, T> = &'a mut dyn FnMut(usize, &ModelParams<T>, &EmbeddingTable<T>);

/// Joint meta-training of θ and one embedding per situation from a seeded
/// random initialization.
pub fn famle_meta_train<T: Scalar>(
    corpus: &MetaCorpus<T>,
    arch: &Architecture,
    cfg: &MetaConfig,
) -> Result<MetaResult<T>> {
    let (theta, table) = initialize(corpus, arch, corpus.len(), cfg.rng_seed)?;
    famle_meta_train_from(corpus, theta, table, cfg, None)
}

/// Joint meta-training from a given initialization.
///
/// Each outer iteration samples a situation `i` uniformly, computes
/// `(θ̃, h̃) = U(θ, h_i)` on `D_i`, then moves `θ` toward `θ̃` with rate
/// `alpha_meta` and `h_i` toward `h̃` with rate `beta_meta`. No other
/// embedding changes in that iteration.
pub fn famle_meta_train_from<T: Scalar>(
    corpus: &MetaCorpus<T>,
    mut theta: ModelParams<T>,
    mut table: EmbeddingTable<T>,
    cfg: &MetaConfig,
    observer: Option<Observer<'_, T>>,
) -> Result<MetaResult<T>> {
    corpus.check_arch(&theta.arch)?;
    if table.len() != corpus.len() {
        return Err(Error::Config(format!(
            "embedding table has {} rows, corpus has {} situations",
            table.len(),
            corpus.len()
        )));
    }
    let log = reptile_loop(corpus, &mut theta, &mut table, false, cfg.beta_meta, cfg, observer)?;
    Ok(MetaResult {
        theta_meta: theta,
        embedding_table: table,
        training_log: log,
    })
}

/// Reptile baseline: one shared prior for every situation.
///
/// When the architecture has an embedding input, a single shared embedding
/// is trained as an extra parameter block with the same outer rate as θ.
pub fn reptile_train<T: Scalar>(
    corpus: &MetaCorpus<T>,
    arch: &Architecture,
    cfg: &MetaConfig,
) -> Result<MetaResult<T>> {
    let (theta, table) = initialize(corpus, arch, 1, cfg.rng_seed)?;
    reptile_train_from(corpus, theta, table.entries()[0].clone(), cfg)
}

pub fn reptile_train_from<T: Scalar>(
    corpus: &MetaCorpus<T>,
    mut theta: ModelParams<T>,
    shared: Embedding<T>,
    cfg: &MetaConfig,
) -> Result<MetaResult<T>> {
    corpus.check_arch(&theta.arch)?;
    let mut table = EmbeddingTable::new(vec![shared])?;
    let log = reptile_loop(corpus, &mut theta, &mut table, true, cfg.alpha_meta, cfg, None)?;
    Ok(MetaResult {
        theta_meta: theta,
        embedding_table: table,
        training_log: log,
    })
}

fn reptile_loop<T: Scalar>(
    corpus: &MetaCorpus<T>,
    theta: &mut ModelParams<T>,
    table: &mut EmbeddingTable<T>,
    shared: bool,
    embed_rate: f64,
    cfg: &MetaConfig,
    mut observer: Option<Observer<'_, T>>,
) -> Result<Vec<LogEntry>> {
    let mut rng = loop_rng(cfg.rng_seed);
    let alpha = T::of(cfg.alpha_meta);
    let beta = T::of(embed_rate);
    let mut log = Vec::with_capacity(cfg.outer_iterations);
    for iteration in 0..cfg.outer_iterations {
        let i = rng.random_range(0..corpus.len());
        let slot = if shared { 0 } else { i };
        let data = &corpus.datasets[i];
        let h = table.get(slot).expect("slot in table");
        let diverged = |reason: String| Error::MetaDiverged { iteration, reason };
        let loss_before = nll_loss(theta, h, data)?;
        let (theta_t, h_t) =
            inner_update(theta, h, data, &cfg.inner, &mut rng).map_err(|e| diverged(e.to_string()))?;
        let loss_after = nll_loss(&theta_t, &h_t, data)?;
        theta.move_toward(&theta_t, alpha);
        let h = table.get_mut(slot);
        h.move_toward(&h_t, beta);
        if !theta.is_finite() || !h.is_finite() {
            return Err(diverged("non-finite outer state".into()));
        }
        log.push(LogEntry {
            iteration,
            situation_index: i,
            loss_before: loss_before.as_f64(),
            loss_after: loss_after.as_f64(),
        });
        if let Some(obs) = observer.as_mut() {
            obs(iteration, theta, table);
        }
    }
    Ok(log)
}

/// First-order MAML baseline from a seeded random initialization.
pub fn maml_fo_train<T: Scalar>(
    corpus: &MetaCorpus<T>,
    arch: &Architecture,
    cfg: &MetaConfig,
) -> Result<MetaResult<T>> {
    let (theta, table) = initialize(corpus, arch, 1, cfg.rng_seed)?;
    maml_fo_train_from(corpus, theta, table.entries()[0].clone(), cfg)
}

/// Splits every dataset into (adaptation, evaluation) halves with
/// [`split_rng`].
pub fn maml_split<T: Scalar>(
    corpus: &MetaCorpus<T>,
    seed: u64,
) -> Result<Vec<(TransitionDataset<T>, TransitionDataset<T>)>> {
    let mut rng = split_rng(seed);
    corpus
        .datasets
        .iter()
        .enumerate()
        .map(|(i, d)| {
            if d.len() < 2 {
                return Err(Error::Config(format!(
                    "situation {i} needs at least 2 transitions for the MAML split"
                )));
            }
            Ok(d.split_halves(&mut rng))
        })
        .collect()
}

/// First-order MAML from a given initialization.
///
/// Per outer iteration: sample a situation, adapt on its first half with the
/// inner update, take the loss gradient on its second half at the adapted
/// point, and apply that gradient to the current θ with rate `alpha_meta`
/// (and to the shared embedding with `beta_meta`). `inner.k = 0` is accepted
/// and reduces to plain SGD on the evaluation halves.
pub fn maml_fo_train_from<T: Scalar>(
    corpus: &MetaCorpus<T>,
    mut theta: ModelParams<T>,
    mut shared: Embedding<T>,
    cfg: &MetaConfig,
) -> Result<MetaResult<T>> {
    corpus.check_arch(&theta.arch)?;
    let halves = maml_split(corpus, cfg.rng_seed)?;
    let mut rng = loop_rng(cfg.rng_seed);
    let alpha = T::of(cfg.alpha_meta);
    let beta = T::of(cfg.beta_meta);
    let mut log = Vec::with_capacity(cfg.outer_iterations);
    for iteration in 0..cfg.outer_iterations {
        let diverged = |reason: String| Error::MetaDiverged { iteration, reason };
        let i = rng.random_range(0..corpus.len());
        let (adapt_half, eval_half) = &halves[i];
        let loss_before = nll_loss(&theta, &shared, eval_half)?;
        let (theta_t, h_t) = inner_update(&theta, &shared, adapt_half, &cfg.inner, &mut rng)
            .map_err(|e| diverged(e.to_string()))?;
        let batch = cfg.inner.batch().select(eval_half, &mut rng);
        let (_, g) = loss_and_grad(&theta_t, &h_t, &batch)?;
        let loss_after = nll_loss(&theta_t, &h_t, eval_half)?;
        theta.sgd_step(&g.params, alpha);
        shared.sgd_step(&g.embedding, beta);
        if !theta.is_finite() || !shared.is_finite() {
            return Err(diverged("non-finite outer state".into()));
        }
        log.push(LogEntry {
            iteration,
            situation_index: i,
            loss_before: loss_before.as_f64(),
            loss_after: loss_after.as_f64(),
        });
    }
    Ok(MetaResult {
        theta_meta: theta,
        embedding_table: EmbeddingTable::new(vec![shared])?,
        training_log: log,
    })
}

/// Mean over situations of the loss after running the inner update from
/// `(θ, h_i)` on `D_i`. With a one-row table every situation uses row 0.
pub fn mean_post_adaptation_loss<T: Scalar>(
    corpus: &MetaCorpus<T>,
    theta: &ModelParams<T>,
    table: &EmbeddingTable<T>,
    inner: &InnerUpdateConfig,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for (i, d) in corpus.datasets.iter().enumerate() {
        let h = table.get(if table.len() == 1 { 0 } else { i }).expect("row");
        let (t, e) = inner_update(theta, h, d, inner, &mut rng)?;
        total += nll_loss(&t, &e, d)?.as_f64();
    }
    Ok(total / corpus.len() as f64)
}
