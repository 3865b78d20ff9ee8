//! Beam search and greedy decoding, optionally with kNN retrieval mixed into
//! every step's distribution.

use std::cmp::Ordering;
use std::collections::HashMap;

use ndarray::Array2;
use rayon::prelude::*;

use crate::data::{Example, WerStats};
use crate::error::{Error, Result};
use crate::model::{softmax, Encoded, ModelView, ParameterSet, BOS, EOS, PAD};
use crate::retrieval::{
    distribution_from_neighbors, interpolate, search, Datastore, IvfPqIndex, Neighbor,
    RetrievalConfig,
};

/// Source of next-token log-probabilities for a decoder.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities of every id after `prefix` (emitted tokens, BOS
    /// excluded).
    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// A decoded sequence. `tokens` never contains EOS; `finished` records
/// whether EOS was emitted.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub finished: bool,
}

/// A client's memory, consulted at every decoding step.
#[derive(Clone, Copy, Debug)]
pub struct RetrievalContext<'a> {
    pub store: &'a Datastore,
    pub config: RetrievalConfig,
    pub index: Option<&'a IvfPqIndex>,
}

fn emittable(v: usize) -> bool {
    v != BOS as usize && v != PAD as usize
}

// Higher score first, then lexicographically smaller tokens.
fn rank(a: &(Vec<u32>, f64), b: &(Vec<u32>, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Length-unnormalized beam search.
///
/// Each step expands every live hypothesis by every emittable id and keeps
/// the `beam_width` best candidates; those ending in EOS retire to the
/// finished pool. Decoding stops after `max_len` steps, when no live
/// hypothesis remains, or once the best finished score is at least the best
/// live score (log-probabilities are non-positive, so no live hypothesis can
/// overtake it). The best finished hypothesis wins; failing that, the best
/// unfinished one.
pub fn beam_search<S: StepScorer + ?Sized>(
    scorer: &mut S,
    beam_width: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam_width == 0 {
        return Err(Error::Config("beam width must be at least 1".into()));
    }
    let mut live: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();

    for _ in 0..max_len {
        let mut candidates = Vec::with_capacity(live.len() * scorer.vocab_size());
        for (tokens, score) in &live {
            let lp = scorer.log_probs(tokens)?;
            for (v, &l) in lp.iter().enumerate().filter(|(v, l)| emittable(*v) && **l > f64::NEG_INFINITY) {
                let mut next = Vec::with_capacity(tokens.len() + 1);
                next.extend_from_slice(tokens);
                next.push(v as u32);
                candidates.push((next, score + l));
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(beam_width);
        live.clear();
        for c in candidates {
            if c.0.last() == Some(&EOS) {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        let best_finished = finished.iter().map(|f| f.1).fold(f64::NEG_INFINITY, f64::max);
        match live.first() {
            None => break,
            Some(best_live) if !finished.is_empty() && best_finished >= best_live.1 => break,
            _ => {}
        }
    }

    finished.sort_by(rank);
    if let Some((mut tokens, score)) = finished.into_iter().next() {
        tokens.pop();
        return Ok(Hypothesis {
            tokens,
            score,
            finished: true,
        });
    }
    let (tokens, score) = live.into_iter().next().unwrap_or((Vec::new(), 0.0));
    Ok(Hypothesis {
        tokens,
        score,
        finished: false,
    })
}

/// Step-by-step argmax decoding (ties to the smaller id).
pub fn greedy<S: StepScorer + ?Sized>(scorer: &mut S, max_len: usize) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for _ in 0..max_len {
        let lp = scorer.log_probs(&tokens)?;
        let (best, l) = lp
            .iter()
            .enumerate()
            .filter(|(v, l)| emittable(*v) && **l > f64::NEG_INFINITY)
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (v, &l)| {
                if l > acc.1 {
                    (v, l)
                } else {
                    acc
                }
            });
        if best == usize::MAX {
            break;
        }
        score += l;
        if best == EOS as usize {
            return Ok(Hypothesis {
                tokens,
                score,
                finished: true,
            });
        }
        tokens.push(best as u32);
    }
    Ok(Hypothesis {
        tokens,
        score,
        finished: false,
    })
}

/// Per-source step distributions of a model, optionally mixed with
/// retrieval.
///
/// The decoder's step depends only on the previous token, so distributions
/// are memoized per previous token.
pub struct ModelScorer<'v, 'a> {
    view: &'v ModelView<'a>,
    enc: Encoded,
    retrieval: Option<RetrievalContext<'v>>,
    cache: HashMap<u32, Vec<f64>>,
}

impl<'v, 'a> ModelScorer<'v, 'a> {
    pub fn new(
        view: &'v ModelView<'a>,
        frames: &Array2<f64>,
        retrieval: Option<RetrievalContext<'v>>,
    ) -> Result<Self> {
        if let Some(r) = &retrieval {
            r.config.validate()?;
            if r.store.dim() != view.hidden_dim() {
                return Err(Error::Shape("datastore keys do not match hidden_dim".into()));
            }
        }
        Ok(ModelScorer {
            view,
            enc: view.encode(frames)?,
            retrieval,
            cache: HashMap::new(),
        })
    }

    /// The (possibly interpolated) next-token distribution after `prev`.
    pub fn probs(&mut self, prev: u32) -> Result<&[f64]> {
        if !self.cache.contains_key(&prev) {
            let step = self.view.step(&self.enc, prev)?;
            let base = softmax(step.logits.view()).to_vec();
            let p = match &self.retrieval {
                None => base,
                Some(r) => {
                    let hidden = step.hidden.to_vec();
                    let neighbors = search(&hidden, r.store, &r.config, r.index, r.config.k)?;
                    mix(&base, &neighbors, &r.config, self.view.vocab_size())?
                }
            };
            self.cache.insert(prev, p);
        }
        Ok(&self.cache[&prev])
    }
}

/// Interpolates the base distribution with the neighbors' vote.
pub(crate) fn mix(
    base: &[f64],
    neighbors: &[Neighbor],
    config: &RetrievalConfig,
    vocab_size: usize,
) -> Result<Vec<f64>> {
    let mem = distribution_from_neighbors(neighbors, config.temperature, vocab_size)?;
    interpolate(base, &mem, config.lambda)
}

impl StepScorer for ModelScorer<'_, '_> {
    fn vocab_size(&self) -> usize {
        self.view.vocab_size()
    }

    fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        let prev = prefix.last().copied().unwrap_or(BOS);
        Ok(self.probs(prev)?.iter().map(|p| p.ln()).collect())
    }
}

/// Step budget for a source of `source_len` frames.
pub fn max_decode_len(source_len: usize) -> usize {
    2 * source_len + 2
}

/// Decodes one source with an already-built model view.
pub fn decode_view(
    view: &ModelView,
    frames: &Array2<f64>,
    beam_width: usize,
    retrieval: Option<RetrievalContext>,
    max_len: usize,
) -> Result<Hypothesis> {
    let mut scorer = ModelScorer::new(view, frames, retrieval)?;
    beam_search(&mut scorer, beam_width, max_len)
}

/// Decodes one source with a merged (adapter-free) model.
pub fn decode(
    params: &ParameterSet,
    frames: &Array2<f64>,
    beam_width: usize,
    retrieval: Option<RetrievalContext>,
    max_len: usize,
) -> Result<Hypothesis> {
    let view = ModelView::new(params, None)?;
    decode_view(&view, frames, beam_width, retrieval, max_len)
}

/// Corpus WER of decoding every example with `params`.
///
/// Examples are decoded in parallel and the statistics reduced in order.
pub fn corpus_wer(
    params: &ParameterSet,
    examples: &[Example],
    beam_width: usize,
    retrieval: Option<RetrievalContext>,
) -> Result<WerStats> {
    let view = ModelView::new(params, None)?;
    let per: Vec<WerStats> = examples
        .par_iter()
        .map(|e| {
            let h = decode_view(&view, &e.frames, beam_width, retrieval, max_decode_len(e.frames.nrows()))?;
            let mut s = WerStats::default();
            s.add(&h.tokens, &e.tokens);
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let mut total = WerStats::default();
    for s in per {
        total.merge(s);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Log-probabilities from an explicit table keyed by prefix.
    struct Table {
        vocab: usize,
        rows: HashMap<Vec<u32>, Vec<f64>>,
    }

    impl StepScorer for Table {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn log_probs(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
            Ok(self.rows[prefix].iter().map(|p: &f64| p.ln()).collect())
        }
    }

    fn row(p_eos: f64, p3: f64, p4: f64) -> Vec<f64> {
        vec![0.0, p_eos, 0.0, p3, p4]
    }

    /// Greedy picks 3 first (0.5) but every continuation of 3 is flat;
    /// 4 leads to a confident EOS.
    fn trap() -> Table {
        let mut rows = HashMap::new();
        rows.insert(vec![], row(0.1, 0.5, 0.4));
        rows.insert(vec![3], row(0.34, 0.33, 0.33));
        rows.insert(vec![4], row(0.9, 0.05, 0.05));
        for a in [3, 4] {
            for b in [3, 4] {
                rows.insert(vec![a, b], row(0.5, 0.25, 0.25));
            }
        }
        Table { vocab: 5, rows }
    }

    /// Best finished sequence of at most `max_len` steps by summed log-prob.
    fn exhaustive(t: &mut Table, max_len: usize) -> (Vec<u32>, f64) {
        let mut best: (Vec<u32>, f64) = (vec![], f64::NEG_INFINITY);
        let mut frontier: Vec<(Vec<u32>, f64)> = vec![(vec![], 0.0)];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for (p, s) in &frontier {
                let lp = t.log_probs(p).unwrap();
                let f = s + lp[1];
                if f > best.1 {
                    best = (p.clone(), f);
                }
                for v in [3u32, 4] {
                    let mut q = p.clone();
                    q.push(v);
                    next.push((q, s + lp[v as usize]));
                }
            }
            frontier = next;
        }
        best
    }

    #[test]
    fn beam_escapes_the_greedy_trap() {
        let mut t = trap();
        let g = greedy(&mut t, 3).unwrap();
        assert_eq!(g.tokens, vec![3]);
        let b = beam_search(&mut t, 5, 3).unwrap();
        let (tokens, score) = exhaustive(&mut t, 3);
        assert_eq!(b.tokens, tokens);
        assert_eq!(b.tokens, vec![4]);
        assert!((b.score - score).abs() < 1e-12);
        assert!(b.finished);
    }

    #[test]
    fn beam_one_matches_greedy_on_the_table() {
        let mut t = trap();
        assert_eq!(beam_search(&mut t, 1, 3).unwrap(), greedy(&mut t, 3).unwrap());
    }

    #[test]
    fn unfinished_when_eos_never_wins() {
        let mut rows = HashMap::new();
        rows.insert(vec![], row(0.0, 1.0, 0.0));
        rows.insert(vec![3], row(0.0, 1.0, 0.0));
        let mut t = Table { vocab: 5, rows };
        let h = beam_search(&mut t, 2, 2).unwrap();
        assert_eq!(h.tokens, vec![3, 3]);
        assert!(!h.finished);
        assert!(beam_search(&mut t, 0, 2).is_err());
        let empty = beam_search(&mut t, 2, 0).unwrap();
        assert!(empty.tokens.is_empty() && !empty.finished);
    }
}

#[cfg(test)]
mod model_tests {
    use super::*;
    use crate::data::{generate_world, WorldConfig};
    use crate::model::ModelConfig;
    use crate::retrieval::build_datastore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn beam_one_is_greedy_and_lambda_zero_is_the_base_model() {
        let world = generate_world(&WorldConfig {
            vocab_size: 10,
            max_len: 5,
            feature_dim: 5,
            num_clients: 1,
            num_invisible: 0,
            train_sizes: vec![20],
            dev_size: 15,
            ..WorldConfig::default()
        })
        .unwrap();
        let config = ModelConfig::new(5, 8, 10, &[], 1, 1.0).unwrap();
        let params = ParameterSet::random(&config, &mut ChaCha8Rng::seed_from_u64(9));
        let store = build_datastore(&params, &world.clients[0].train).unwrap();
        let view = ModelView::new(&params, None).unwrap();
        for e in &world.clients[0].dev {
            let n = max_decode_len(e.frames.nrows());
            let mut s = ModelScorer::new(&view, &e.frames, None).unwrap();
            let g = greedy(&mut s, n).unwrap();
            assert_eq!(beam_search(&mut s, 1, n).unwrap(), g);
            let ctx = RetrievalContext {
                store: &store,
                config: crate::retrieval::RetrievalConfig::exact(4, 0.0, 10.0),
                index: None,
            };
            let mut r = ModelScorer::new(&view, &e.frames, Some(ctx)).unwrap();
            assert_eq!(greedy(&mut r, n).unwrap().tokens, g.tokens);
            let wide = beam_search(&mut s, 6, n).unwrap();
            assert!(!wide.finished || !g.finished || wide.score >= g.score - 1e-12);
        }
    }
}
