//! Client-side memorization and retrieval.
//!
//! A [`Datastore`] caches `(h_t, y_t)` pairs produced by teacher-forcing the
//! global model over a client's data. At decode time the current hidden
//! state queries the store; the `k` nearest keys (squared Euclidean
//! distance) vote for their values with weight `exp(−d²/T)`, and the
//! resulting distribution is mixed with the model's own softmax:
//! `p = λ·p_mem + (1 − λ)·p_model`.

mod io;
mod ivfpq;
mod kmeans;
mod tune;

use serde::{Deserialize, Serialize};

pub use io::{read_datastore, read_index, write_datastore, write_index, DATASTORE_MAGIC, INDEX_MAGIC};
pub use ivfpq::{approx_knn, build_ivfpq, IvfPqIndex, ProductQuantizer};
pub use kmeans::{kmeans, KMeansResult};
pub use tune::{tune_hyperparameters, RetrievalGrid, TuneOutcome};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{ModelView, ParameterSet, BOS, EOS};

/// Cached context representations and their next tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Datastore {
    dim: usize,
    /// Row-major `N × dim`.
    keys: Vec<f32>,
    values: Vec<u32>,
}

impl Datastore {
    pub fn new(dim: usize, keys: Vec<f32>, values: Vec<u32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("datastore dimension must be positive".into()));
        }
        if keys.len() != dim * values.len() {
            return Err(Error::Shape(format!(
                "{} key scalars for {} values of dimension {dim}",
                keys.len(),
                values.len()
            )));
        }
        Ok(Datastore { dim, keys, values })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn key(&self, row: usize) -> &[f32] {
        &self.keys[row * self.dim..(row + 1) * self.dim]
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }
}

/// Search structure used to find neighbors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    Exact,
    IvfPq,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    pub k: usize,
    pub lambda: f64,
    pub temperature: f64,
    /// Coarse clusters scanned per query (IVF-PQ only).
    pub nprobe: usize,
    pub backend: Backend,
}

impl RetrievalConfig {
    pub fn exact(k: usize, lambda: f64, temperature: f64) -> Self {
        RetrievalConfig {
            k,
            lambda,
            temperature,
            nprobe: 1,
            backend: Backend::Exact,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Lambda(self.lambda));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.nprobe == 0 {
            return Err(Error::Config("nprobe must be positive".into()));
        }
        Ok(())
    }
}

/// A retrieved datastore row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    /// Squared Euclidean distance (approximate for IVF-PQ).
    pub dist: f64,
    pub value: u32,
}

pub(crate) fn sq_dist(query: &[f64], key: &[f32]) -> f64 {
    query
        .iter()
        .zip(key)
        .map(|(&q, &k)| {
            let d = q - f64::from(k);
            d * d
        })
        .sum()
}

/// Keeps the `k` smallest `(dist, row)` pairs, sorted.
pub(crate) fn select_k(mut all: Vec<Neighbor>, k: usize) -> Vec<Neighbor> {
    let order = |a: &Neighbor, b: &Neighbor| a.dist.total_cmp(&b.dist).then(a.row.cmp(&b.row));
    if all.len() > k && k > 0 {
        all.select_nth_unstable_by(k - 1, order);
        all.truncate(k);
    }
    all.sort_unstable_by(order);
    all
}

/// Brute-force `k` nearest neighbors; ties go to the lower row index.
pub fn exact_knn(store: &Datastore, query: &[f64], k: usize) -> Result<Vec<Neighbor>> {
    if query.len() != store.dim {
        return Err(Error::Shape(format!(
            "query has dimension {}, datastore {}",
            query.len(),
            store.dim
        )));
    }
    if store.is_empty() {
        return Err(Error::Empty("datastore"));
    }
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if k > store.len() {
        return Err(Error::TooFewEntries {
            k,
            available: store.len(),
        });
    }
    let all = (0..store.len())
        .map(|row| Neighbor {
            row,
            dist: sq_dist(query, store.key(row)),
            value: store.values[row],
        })
        .collect();
    Ok(select_k(all, k))
}

/// `p(v) ∝ Σ_{neighbors with value v} exp(−d²/T)` over a vocabulary of
/// `vocab_size`. Weights are shifted by the smallest distance before
/// exponentiation, which cancels in the normalization.
pub fn distribution_from_neighbors(
    neighbors: &[Neighbor],
    temperature: f64,
    vocab_size: usize,
) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::Empty("neighbor set"));
    }
    let d_min = neighbors
        .iter()
        .map(|n| n.dist)
        .fold(f64::INFINITY, f64::min);
    let mut p = vec![0.0; vocab_size];
    for n in neighbors {
        let v = n.value as usize;
        if v >= vocab_size {
            return Err(Error::TokenOutOfRange {
                id: n.value,
                vocab: vocab_size,
            });
        }
        p[v] += (-(n.dist - d_min) / temperature).exp();
    }
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    Ok(p)
}

/// The retrieval distribution for one query.
///
/// `index` is required when `config.backend` is [`Backend::IvfPq`].
pub fn knn_distribution(
    query: &[f64],
    store: &Datastore,
    config: &RetrievalConfig,
    index: Option<&IvfPqIndex>,
    vocab_size: usize,
) -> Result<Vec<f64>> {
    config.validate()?;
    let neighbors = search(query, store, config, index, config.k)?;
    distribution_from_neighbors(&neighbors, config.temperature, vocab_size)
}

/// Nearest neighbors through whichever backend `config` selects.
pub(crate) fn search(
    query: &[f64],
    store: &Datastore,
    config: &RetrievalConfig,
    index: Option<&IvfPqIndex>,
    k: usize,
) -> Result<Vec<Neighbor>> {
    if k > store.len() {
        return Err(Error::TooFewEntries {
            k,
            available: store.len(),
        });
    }
    match config.backend {
        Backend::Exact => exact_knn(store, query, k),
        Backend::IvfPq => {
            let index = index.ok_or_else(|| Error::Config("IVF-PQ backend needs an index".into()))?;
            approx_knn(index, query, k, config.nprobe)
        }
    }
}

/// `λ·p_mem + (1 − λ)·p_base`.
pub fn interpolate(p_base: &[f64], p_mem: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Lambda(lambda));
    }
    if p_base.len() != p_mem.len() {
        return Err(Error::Shape("distributions differ in length".into()));
    }
    for p in [p_base, p_mem] {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized(s));
        }
    }
    Ok(p_base
        .iter()
        .zip(p_mem)
        .map(|(&b, &m)| lambda * m + (1.0 - lambda) * b)
        .collect())
}

/// Teacher-forces `data` through `params` and stores `(h_t, y_t)` for every
/// target position, EOS included. Rows follow example order, then `t`.
pub fn build_datastore(params: &ParameterSet, data: &[Example]) -> Result<Datastore> {
    build_datastore_with(params, data, true)
}

/// As [`build_datastore`]; with `include_eos = false` the final EOS target
/// of each example is skipped.
pub fn build_datastore_with(
    params: &ParameterSet,
    data: &[Example],
    include_eos: bool,
) -> Result<Datastore> {
    if data.is_empty() {
        return Err(Error::Empty("datastore source data"));
    }
    let view = ModelView::new(params, None)?;
    let dim = view.hidden_dim();
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for example in data {
        let enc = view.encode(&example.frames)?;
        let prevs = std::iter::once(BOS).chain(example.tokens.iter().copied());
        let targets = example.tokens.iter().copied().chain(std::iter::once(EOS));
        for (prev, target) in prevs.zip(targets) {
            if target == EOS && !include_eos {
                continue;
            }
            let step = view.step(&enc, prev)?;
            keys.extend(step.hidden.iter().map(|&h| h as f32));
            values.push(target);
        }
    }
    Datastore::new(dim, keys, values)
}
