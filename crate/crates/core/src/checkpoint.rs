//! Versioned JSON checkpoint of a trained model and its embedding table.
//!
//! Reals are written with the shortest decimal form that round-trips, so
//! save followed by load reproduces every parameter bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{MetaResult, Method};
use crate::model::{Activation, Architecture, Embedding, EmbeddingTable, Layer, ModelParams, Normalizer};
use crate::scalar::Scalar;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchitectureDoc {
    state_dim: usize,
    action_dim: usize,
    embed_dim: usize,
    layer_sizes: Vec<usize>,
    hidden_activation: Activation,
    output_activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NormalizationDoc {
    state_mean: Vec<f64>,
    state_std: Vec<f64>,
    action_mean: Vec<f64>,
    action_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    /// Row-major `out x in`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDoc {
    format_version: u32,
    scalar: String,
    method: Method,
    architecture: ArchitectureDoc,
    normalization: NormalizationDoc,
    parameters: Vec<LayerDoc>,
    /// Row `i` is the embedding of situation `i`.
    embedding_table: Vec<Vec<f64>>,
}

/// A model and its embedding table as persisted on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub method: Method,
    pub theta: ModelParams<T>,
    pub table: EmbeddingTable<T>,
}

fn widen<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn narrow<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(method: Method, theta: ModelParams<T>, table: EmbeddingTable<T>) -> Result<Self> {
        if table.dim() != theta.arch.embed_dim {
            return Err(Error::Config("embedding table dim differs from model".into()));
        }
        Ok(Self { method, theta, table })
    }

    pub fn from_result(method: Method, result: &MetaResult<T>) -> Self {
        Self {
            method,
            theta: result.theta_meta.clone(),
            table: result.embedding_table.clone(),
        }
    }

    fn to_doc(&self) -> CheckpointDoc {
        let p = &self.theta;
        CheckpointDoc {
            format_version: FORMAT_VERSION,
            scalar: T::type_name().to_string(),
            method: self.method,
            architecture: ArchitectureDoc {
                state_dim: p.arch.state_dim,
                action_dim: p.arch.action_dim,
                embed_dim: p.arch.embed_dim,
                layer_sizes: p.arch.layer_sizes(),
                hidden_activation: Activation::Tanh,
                output_activation: Activation::Identity,
            },
            normalization: NormalizationDoc {
                state_mean: widen(&p.norm.state_mean),
                state_std: widen(&p.norm.state_std),
                action_mean: widen(&p.norm.action_mean),
                action_std: widen(&p.norm.action_std),
            },
            parameters: p
                .layers
                .iter()
                .map(|l| LayerDoc {
                    weights: widen(&l.weights),
                    bias: widen(&l.bias),
                })
                .collect(),
            embedding_table: self.table.iter().map(|e| widen(&e.values)).collect(),
        }
    }

    fn from_doc(doc: CheckpointDoc) -> Result<Self> {
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint format_version {}",
                doc.format_version
            )));
        }
        let a = &doc.architecture;
        if a.hidden_activation != Activation::Tanh || a.output_activation != Activation::Identity {
            return Err(Error::Format("unsupported activation".into()));
        }
        let n = a.layer_sizes.len();
        if n < 2
            || a.layer_sizes[0] != a.state_dim + a.action_dim + a.embed_dim
            || a.layer_sizes[n - 1] != a.state_dim
        {
            return Err(Error::Format("layer sizes inconsistent with dims".into()));
        }
        let arch = Architecture::new(
            a.state_dim,
            a.action_dim,
            a.embed_dim,
            a.layer_sizes[1..n - 1].to_vec(),
        );
        if doc.parameters.len() != n - 1 {
            return Err(Error::Format("parameter layer count mismatch".into()));
        }
        let layers = doc
            .parameters
            .iter()
            .zip(a.layer_sizes.windows(2))
            .enumerate()
            .map(|(i, (l, w))| Layer {
                in_dim: w[0],
                out_dim: w[1],
                weights: narrow(&l.weights),
                bias: narrow(&l.bias),
                activation: if i == n - 2 {
                    Activation::Identity
                } else {
                    Activation::Tanh
                },
            })
            .collect();
        let nd = &doc.normalization;
        let norm = Normalizer {
            state_mean: narrow(&nd.state_mean),
            state_std: narrow(&nd.state_std),
            action_mean: narrow(&nd.action_mean),
            action_std: narrow(&nd.action_std),
        };
        let theta = ModelParams::from_layers(arch, layers, norm)
            .map_err(|e| Error::Format(format!("invalid parameters: {e}")))?;
        let table = EmbeddingTable::new(
            doc.embedding_table
                .iter()
                .map(|row| Embedding::new(narrow(row)))
                .collect(),
        )
        .map_err(|e| Error::Format(format!("invalid embedding table: {e}")))?;
        Self::new(doc.method, theta, table)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_doc(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
