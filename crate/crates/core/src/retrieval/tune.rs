//! Exhaustive dev-set search over `(k, λ, T)`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{search, Datastore, IvfPqIndex, Neighbor, RetrievalConfig};
use crate::data::{Example, WerStats};
use crate::decode::{greedy, max_decode_len, mix, StepScorer};
use crate::error::{Error, Result};
use crate::model::{softmax, Encoded, ModelView, ParameterSet, BOS};

/// Candidate values for each retrieval hyperparameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalGrid {
    pub ks: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub temperatures: Vec<f64>,
}

impl Default for RetrievalGrid {
    fn default() -> Self {
        RetrievalGrid {
            ks: vec![4, 8, 16],
            lambdas: (1..=9).map(|i| f64::from(i) / 10.0).collect(),
            temperatures: vec![10.0, 20.0, 50.0, 100.0, 200.0],
        }
    }
}

impl RetrievalGrid {
    /// Grid points in tie-break order: `k`, then `λ`, then `T`, ascending.
    pub fn points(&self) -> Vec<(usize, f64, f64)> {
        let mut ks = self.ks.clone();
        ks.sort_unstable();
        ks.dedup();
        let sorted = |v: &[f64]| {
            let mut v = v.to_vec();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let lambdas = sorted(&self.lambdas);
        let temperatures = sorted(&self.temperatures);
        let mut out = Vec::with_capacity(ks.len() * lambdas.len() * temperatures.len());
        for &k in &ks {
            for &l in &lambdas {
                for &t in &temperatures {
                    out.push((k, l, t));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: RetrievalConfig,
    pub best_wer: f64,
    /// Dev WER of every grid point, in [`RetrievalGrid::points`] order.
    pub evaluations: Vec<(RetrievalConfig, f64)>,
}

/// Base distribution and the `k_max` nearest neighbors per previous token.
/// Any `k ≤ k_max` uses a prefix of the neighbor list.
struct SourceCache<'v, 'a> {
    view: &'v ModelView<'a>,
    enc: Encoded,
    store: &'v Datastore,
    template: RetrievalConfig,
    index: Option<&'v IvfPqIndex>,
    k_max: usize,
    steps: HashMap<u32, (Vec<f64>, Vec<Neighbor>)>,
}

impl SourceCache<'_, '_> {
    fn entry(&mut self, prev: u32) -> Result<&(Vec<f64>, Vec<Neighbor>)> {
        if !self.steps.contains_key(&prev) {
            let step = self.view.step(&self.enc, prev)?;
            let base = softmax(step.logits.view()).to_vec();
            let hidden = step.hidden.to_vec();
            let nb = search(&hidden, self.store, &self.template, self.index, self.k_max)?;
            self.steps.insert(prev, (base, nb));
        }
        Ok(&self.steps[&prev])
    }
}

struct GridScorer<'c, 'v, 'a> {
    cache: &'c mut SourceCache<'v, 'a>,
    config: RetrievalConfig,
}

impl StepScorer for GridScorer<'_, '_, '_> {
    fn vocab_size(&self) -> usize {
        self.cache.view.vocab_size()
    }

    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let vocab = self.vocab_size();
        let prev = prefix.last().copied().unwrap_or(BOS);
        let config = self.config;
        let (base, nb) = self.cache.entry(prev)?;
        let k = config.k.min(nb.len());
        let p = mix(base, &nb[..k], &config, vocab)?;
        Ok(p.iter().map(|x| x.ln()).collect())
    }
}

/// Picks the grid point with the lowest corpus WER on `dev` under greedy
/// interpolated decoding. Ties go to the smaller `k`, then the smaller `λ`,
/// then the smaller `T`.
///
/// `template` supplies the backend and `nprobe`; its `k`, `λ` and `T` are
/// ignored.
pub fn tune_hyperparameters(
    params: &ParameterSet,
    store: &Datastore,
    index: Option<&IvfPqIndex>,
    dev: &[Example],
    grid: &RetrievalGrid,
    template: RetrievalConfig,
) -> Result<TuneOutcome> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::Config("empty retrieval grid".into()));
    }
    if dev.is_empty() {
        return Err(Error::Empty("dev set"));
    }
    if store.is_empty() {
        return Err(Error::Empty("datastore"));
    }
    let configs: Vec<RetrievalConfig> = points
        .iter()
        .map(|&(k, lambda, temperature)| RetrievalConfig {
            k,
            lambda,
            temperature,
            ..template
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let k_max = points.iter().map(|p| p.0).max().unwrap_or(1);
    if k_max > store.len() {
        return Err(Error::TooFewEntries {
            k: k_max,
            available: store.len(),
        });
    }
    let view = ModelView::new(params, None)?;
    if store.dim() != view.hidden_dim() {
        return Err(Error::Shape("datastore keys do not match hidden_dim".into()));
    }

    let per_example: Vec<Vec<WerStats>> = dev
        .par_iter()
        .map(|example| {
            let mut cache = SourceCache {
                view: &view,
                enc: view.encode(&example.frames)?,
                store,
                template,
                index,
                k_max,
                steps: HashMap::new(),
            };
            let max_len = max_decode_len(example.frames.nrows());
            configs
                .iter()
                .map(|&config| {
                    let mut scorer = GridScorer {
                        cache: &mut cache,
                        config,
                    };
                    let hyp = greedy(&mut scorer, max_len)?;
                    let mut stats = WerStats::default();
                    stats.add(&hyp.tokens, &example.tokens);
                    Ok(stats)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut evaluations = Vec::with_capacity(configs.len());
    for (i, &config) in configs.iter().enumerate() {
        let mut total = WerStats::default();
        for stats in &per_example {
            total.merge(stats[i]);
        }
        evaluations.push((config, total.wer()));
    }
    let (best, best_wer) = evaluations
        .iter()
        .copied()
        .fold(None, |acc: Option<(RetrievalConfig, f64)>, (c, w)| match acc {
            Some((_, bw)) if bw <= w => acc,
            _ => Some((c, w)),
        })
        .expect("grid is nonempty");
    Ok(TuneOutcome {
        best,
        best_wer,
        evaluations,
    })
}
