//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance suite.
//!
//! The oracles here are written against plain `Vec<f64>` loops and never
//! call the library's own numerical routines.

#![allow(dead_code)]

use feds2t::data::{generate_world, ClientDataset, Example, WorldConfig};
use feds2t::decode::{decode, greedy, max_decode_len, ModelScorer, RetrievalContext};
use feds2t::fed::{predicted_cost, run_federation, FederationConfig, Mode};
use feds2t::model::{
    forward, loss_and_grads, merge, Gradients, LoraAdapter, LoraTarget, ModelConfig, ModelView, ParameterSet,
    Tensors, BOS, EOS,
};
use feds2t::retrieval::{
    approx_knn, build_datastore, build_ivfpq, exact_knn, knn_distribution, Datastore, RetrievalConfig,
};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Check = Result<(), String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Check {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect::<Vec<f64>>()
}

pub fn random_frames(rng: &mut ChaCha8Rng, len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_vec((len, dim), gaussian(rng, len * dim, 1.0)).unwrap()
}

pub fn random_example(rng: &mut ChaCha8Rng, config: &ModelConfig, len: usize) -> Example {
    let frames = random_frames(rng, len + 1, config.feature_dim);
    let tokens = (0..len).map(|_| rng.random_range(3..config.vocab_size as u32)).collect();
    Example::new(frames, tokens).unwrap()
}

/// A backbone with every entry drawn from `N(0, scale²)`.
pub fn random_params(config: &ModelConfig, rng: &mut ChaCha8Rng, scale: f64) -> ParameterSet {
    let mut p = ParameterSet::zeros(config);
    for t in p.tensors_mut() {
        for x in t.iter_mut() {
            *x = scale * normal(rng);
        }
    }
    p
}

/// An adapter with nonzero `A` and `B`, so its update is nonzero.
pub fn random_adapter(config: &ModelConfig, rng: &mut ChaCha8Rng, scale: f64) -> LoraAdapter {
    let mut a = LoraAdapter::zeros(config);
    for t in a.tensors_mut() {
        for x in t.iter_mut() {
            *x = scale * normal(rng);
        }
    }
    a
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn matvec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Effective weight `W + (α/r)·B·A` by explicit triple loop.
fn effective(base: &Array2<f64>, adapter: Option<&LoraAdapter>, target: LoraTarget) -> Vec<Vec<f64>> {
    let mut w = rows(base);
    if let Some(ad) = adapter {
        if let Some(f) = ad.get(target) {
            let scale = ad.alpha / ad.rank as f64;
            for (i, row) in w.iter_mut().enumerate() {
                for (j, x) in row.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for k in 0..ad.rank {
                        s += f.b[[i, k]] * f.a[[k, j]];
                    }
                    *x += scale * s;
                }
            }
        }
    }
    w
}

/// Hidden states and logits of every decoder step, by plain loops.
pub fn reference_forward(
    p: &ParameterSet,
    adapter: Option<&LoraAdapter>,
    frames: &Array2<f64>,
    prev: &[u32],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let w_enc = effective(&p.w_enc, adapter, LoraTarget::Enc);
    let w_q = effective(&p.w_q, adapter, LoraTarget::Query);
    let w_h = effective(&p.w_h, adapter, LoraTarget::Hidden);
    let w_o = effective(&p.w_o, adapter, LoraTarget::Output);
    let dh = w_q.len();
    let enc: Vec<Vec<f64>> = rows(frames)
        .iter()
        .map(|x| matvec(&w_enc, x).into_iter().map(f64::tanh).collect())
        .collect();
    let mut hiddens = Vec::new();
    let mut logits = Vec::new();
    for &t in prev {
        let emb = p.embedding.row(t as usize).to_vec();
        let q = matvec(&w_q, &emb);
        let scores: Vec<f64> = enc.iter().map(|e| e.iter().zip(&q).map(|(a, b)| a * b).sum()).collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let mut c = vec![0.0; dh];
        for (e, w) in enc.iter().zip(&exps) {
            for (ci, ei) in c.iter_mut().zip(e) {
                *ci += w / z * ei;
            }
        }
        let joined: Vec<f64> = emb.iter().chain(&c).copied().collect();
        let h: Vec<f64> = matvec(&w_h, &joined)
            .iter()
            .zip(p.b_h.iter())
            .map(|(a, b)| (a + b).tanh())
            .collect();
        let l: Vec<f64> = matvec(&w_o, &h).iter().zip(p.b_o.iter()).map(|(a, b)| a + b).collect();
        hiddens.push(h);
        logits.push(l);
    }
    (hiddens, logits)
}

/// Mean token NLL of a batch by the reference forward pass.
pub fn reference_loss(p: &ParameterSet, adapter: Option<&LoraAdapter>, batch: &[Example]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in batch {
        let prev: Vec<u32> = std::iter::once(BOS).chain(ex.tokens.iter().copied()).collect();
        let targets: Vec<u32> = ex.tokens.iter().copied().chain(std::iter::once(EOS)).collect();
        let (_, logits) = reference_forward(p, adapter, &ex.frames, &prev);
        for (l, &y) in logits.iter().zip(&targets) {
            let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + l.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - l[y as usize];
            count += 1;
        }
    }
    total / count as f64
}

/// Worst relative error of analytic against central-difference gradients
/// over every trainable scalar.
pub fn gradient_check(params: &ParameterSet, adapter: Option<&LoraAdapter>, batch: &[Example], step: f64) -> f64 {
    let (_, grads) = loss_and_grads(params, adapter, batch).unwrap();
    let analytic: Vec<f64> = grads.tensors().concat();
    let mut numeric = Vec::with_capacity(analytic.len());
    match adapter {
        None => {
            let mut p = params.clone();
            let n = p.num_scalars();
            for i in 0..n {
                let orig = get_flat(&p, i);
                set_flat(&mut p, i, orig + step);
                let up = reference_loss(&p, None, batch);
                set_flat(&mut p, i, orig - step);
                let down = reference_loss(&p, None, batch);
                set_flat(&mut p, i, orig);
                numeric.push((up - down) / (2.0 * step));
            }
        }
        Some(a) => {
            let mut a = a.clone();
            let n = a.num_scalars();
            for i in 0..n {
                let orig = get_flat(&a, i);
                set_flat(&mut a, i, orig + step);
                let up = reference_loss(params, Some(&a), batch);
                set_flat(&mut a, i, orig - step);
                let down = reference_loss(params, Some(&a), batch);
                set_flat(&mut a, i, orig);
                numeric.push((up - down) / (2.0 * step));
            }
        }
    }
    assert!(matches!(
        (&grads, adapter),
        (Gradients::Full(_), None) | (Gradients::Lora(_), Some(_))
    ));
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

pub fn get_flat<T: Tensors>(t: &T, mut i: usize) -> f64 {
    for s in t.tensors() {
        if i < s.len() {
            return s[i];
        }
        i -= s.len();
    }
    panic!("flat index out of range")
}

pub fn set_flat<T: Tensors>(t: &mut T, mut i: usize, v: f64) {
    for s in t.tensors_mut() {
        if i < s.len() {
            s[i] = v;
            return;
        }
        i -= s.len();
    }
    panic!("flat index out of range")
}

pub fn all_targets() -> Vec<LoraTarget> {
    vec![LoraTarget::Enc, LoraTarget::Query, LoraTarget::Hidden, LoraTarget::Output]
}

/// Numerical-core checks: gradient, merge equivalence, zero-adapter
/// identity and loss at a zero initialization.
pub fn numerical_core() -> Check {
    let config = ModelConfig::new(3, 4, 7, &all_targets(), 2, 3.0).unwrap();
    let mut r = rng(11);
    let params = random_params(&config, &mut r, 0.5);
    let batch: Vec<Example> = (0..3).map(|i| random_example(&mut r, &config, 2 + i)).collect();

    let full = gradient_check(&params, None, &batch, 1e-5);
    ensure(full < 1e-4, || format!("backbone gradient rel. error {full:e}"))?;
    let adapter = random_adapter(&config, &mut r, 0.3);
    let lora = gradient_check(&params, Some(&adapter), &batch, 1e-5);
    ensure(lora < 1e-4, || format!("adapter gradient rel. error {lora:e}"))?;

    let merged = merge(&params, &adapter).unwrap();
    for ex in &batch {
        let prev: Vec<u32> = std::iter::once(BOS).chain(ex.tokens.iter().copied()).collect();
        let a = forward(&params, Some(&adapter), &ex.frames, &prev).unwrap();
        let m = forward(&merged, None, &ex.frames, &prev).unwrap();
        for (x, y) in a.logits.iter().zip(&m.logits) {
            let dev = (x - y).iter().fold(0.0f64, |acc, d| acc.max(d.abs()));
            ensure(dev < 1e-9, || format!("merge deviation {dev:e}"))?;
        }
        let fresh = LoraAdapter::init(&config, &mut r);
        let with = forward(&params, Some(&fresh), &ex.frames, &prev).unwrap();
        let without = forward(&params, None, &ex.frames, &prev).unwrap();
        ensure(with == without, || "fresh adapter changed the output".into())?;
    }

    let zero = ParameterSet::zeros(&config);
    let (loss, _) = loss_and_grads(&zero, None, &batch).unwrap();
    let want = (config.vocab_size as f64).ln();
    ensure((loss - want).abs() < 1e-12, || format!("zero-init loss {loss} vs ln V {want}"))
}

/// Naive `k` nearest rows: every distance in f64, sorted by `(dist, row)`.
pub fn naive_knn(store: &Datastore, query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..store.len())
        .map(|row| {
            let d = store
                .key(row)
                .iter()
                .zip(query)
                .map(|(&x, &q)| (q - f64::from(x)).powi(2))
                .sum();
            (row, d)
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

pub fn random_store(rng: &mut ChaCha8Rng, n: usize, dim: usize, vocab: u32) -> Datastore {
    let keys: Vec<f32> = gaussian(rng, n * dim, 1.0).into_iter().map(|x| x as f32).collect();
    let values = (0..n).map(|_| rng.random_range(3..vocab)).collect();
    Datastore::new(dim, keys, values).unwrap()
}

/// Rows drawn around `clusters` well-separated Gaussian centers.
pub fn clustered_store(rng: &mut ChaCha8Rng, n: usize, dim: usize, clusters: usize) -> (Datastore, Vec<Vec<f64>>) {
    let centers: Vec<Vec<f64>> = (0..clusters).map(|_| gaussian(rng, dim, 3.0)).collect();
    let mut keys = Vec::with_capacity(n * dim);
    for i in 0..n {
        let c = &centers[i % clusters];
        keys.extend(c.iter().map(|&x| (x + 0.5 * normal(rng)) as f32));
    }
    let values = (0..n).map(|i| 3 + (i % 5) as u32).collect();
    (Datastore::new(dim, keys, values).unwrap(), centers)
}

/// Mean overlap of approximate and exact top-`k` row sets.
pub fn ivfpq_recall(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (store, centers) = clustered_store(&mut r, 512, 16, 32);
    let index = build_ivfpq(&store, 32, 8, 20, seed).unwrap();
    let queries = 200;
    let mut hits = 0usize;
    for i in 0..queries {
        let c = &centers[i % centers.len()];
        let q: Vec<f64> = c.iter().map(|&x| x + 0.5 * normal(&mut r)).collect();
        let exact: Vec<usize> = exact_knn(&store, &q, 8).unwrap().iter().map(|n| n.row).collect();
        let approx = approx_knn(&index, &q, 8, 32 / 4).unwrap();
        hits += approx.iter().filter(|n| exact.contains(&n.row)).count();
    }
    hits as f64 / (queries * 8) as f64
}

/// Retrieval-core checks.
pub fn retrieval_core() -> Check {
    let mut r = rng(21);
    let store = random_store(&mut r, 2000, 8, 12);

    let cfg = RetrievalConfig::exact(8, 0.5, 10.0);
    for _ in 0..200 {
        let q = gaussian(&mut r, 8, 1.0);
        let p = knn_distribution(&q, &store, &cfg, None, 12).unwrap();
        let s: f64 = p.iter().sum();
        ensure((s - 1.0).abs() < 1e-9 && p.iter().all(|&x| x >= 0.0), || {
            format!("retrieval distribution sums to {s}")
        })?;
    }

    for i in 0..10_000 {
        let q = gaussian(&mut r, 8, 1.0);
        let got: Vec<(usize, f64)> = exact_knn(&store, &q, 8).unwrap().iter().map(|n| (n.row, n.dist)).collect();
        let want = naive_knn(&store, &q, 8);
        ensure(got.len() == want.len(), || format!("query {i}: {} rows", got.len()))?;
        for (g, w) in got.iter().zip(&want) {
            ensure(g.0 == w.0 && (g.1 - w.1).abs() <= 1e-12 * w.1.max(1.0), || {
                format!("query {i}: exact {g:?} vs naive {w:?}")
            })?;
        }
    }

    let ivf = build_ivfpq(&store, 16, 0, 10, 3).unwrap();
    for i in 0..500 {
        let q = gaussian(&mut r, 8, 1.0);
        let exact = exact_knn(&store, &q, 8).unwrap();
        let approx = approx_knn(&ivf, &q, 8, 16).unwrap();
        ensure(exact == approx, || format!("query {i}: full-probe IVF differs from exact"))?;
    }

    let recall = ivfpq_recall(5);
    ensure(recall >= 0.9, || format!("IVF-PQ recall@8 {recall:.3}"))?;

    lambda_zero_invariance(100)
}

/// Greedy decoding with `λ = 0` retrieval emits the base model's tokens.
pub fn lambda_zero_invariance(sequences: usize) -> Check {
    let config = ModelConfig::new(4, 6, 10, &[], 1, 1.0).unwrap();
    let mut r = rng(31);
    let params = random_params(&config, &mut r, 0.8);
    let data: Vec<Example> = (0..40).map(|_| random_example(&mut r, &config, 4)).collect();
    let store = build_datastore(&params, &data).unwrap();
    let view = ModelView::new(&params, None).unwrap();
    for i in 0..sequences {
        let len = 2 + i % 5;
        let frames = random_frames(&mut r, len, 4);
        let max_len = max_decode_len(len);
        let base = greedy(&mut ModelScorer::new(&view, &frames, None).unwrap(), max_len).unwrap();
        let ctx = RetrievalContext {
            store: &store,
            config: RetrievalConfig::exact(8, 0.0, 10.0),
            index: None,
        };
        let mixed = greedy(&mut ModelScorer::new(&view, &frames, Some(ctx)).unwrap(), max_len).unwrap();
        ensure(base.tokens == mixed.tokens, || format!("sequence {i}: λ=0 changed the output"))?;
        let beam = decode(&params, &frames, 1, Some(ctx), max_len).unwrap();
        ensure(beam.tokens == base.tokens, || format!("sequence {i}: beam 1 differs from greedy"))?;
    }
    Ok(())
}

/// A world small enough for many federation runs.
pub fn tiny_world(num_clients: usize, seed: u64) -> (Vec<ClientDataset>, ModelConfig, ParameterSet) {
    let world = generate_world(&WorldConfig {
        vocab_size: 10,
        feature_dim: 4,
        num_clients,
        num_invisible: 0,
        train_sizes: (0..num_clients).map(|i| 2 + i % 4).collect(),
        dev_size: 2,
        test_size: 1,
        public_train_size: 1,
        public_dev_size: 1,
        max_len: 5,
        seed,
        ..WorldConfig::default()
    })
    .unwrap();
    let model = ModelConfig::new(4, 6, 10, &[LoraTarget::Query, LoraTarget::Hidden], 2, 4.0).unwrap();
    let backbone = ParameterSet::random(&model, &mut rng(seed));
    (world.clients, model, backbone)
}

/// Ledger totals equal the closed form for every `(|C|, r, mode)` in the
/// matrix.
pub fn ledger_matrix() -> Check {
    for clients in [1usize, 2, 4, 8] {
        let (data, model, backbone) = tiny_world(clients, clients as u64);
        for rounds in [0usize, 1, 3, 10] {
            for mode in [Mode::Full, Mode::Lora] {
                let cfg = FederationConfig {
                    max_rounds: rounds,
                    patience: rounds + 1,
                    batch_size: 2,
                    ..FederationConfig::new(clients, mode)
                };
                let out = run_federation(&data, &backbone, &model, &cfg).map_err(|e| e.to_string())?;
                let l = &out.ledger;
                let want = predicted_cost(l.h_theta, l.h_delta, clients as u64, rounds as u64, mode);
                ensure(out.rounds_run as usize == rounds && l.total() == want, || {
                    format!(
                        "|C|={clients} r={rounds} {}: ran {} rounds, ledger {} vs formula {want}",
                        mode.name(),
                        out.rounds_run,
                        l.total()
                    )
                })?;
            }
        }
    }
    Ok(())
}
