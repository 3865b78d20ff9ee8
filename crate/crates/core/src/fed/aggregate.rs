use super::Payload;
use crate::error::{Error, Result};
use crate::model::Tensors;

/// Weighted elementwise mean `Σ (n_m / n)·payload_m`.
///
/// The mean is accumulated as a running update
/// `μ ← μ + (n_m / Σ_{j≤m} n_j)·(x_m − μ)` in client order, which equals the
/// weighted sum algebraically and returns identical inputs unchanged bit for
/// bit. In LORA mode this averages the `A` and `B` factors separately.
pub fn aggregate(payloads: &[Payload], weights: &[f64]) -> Result<Payload> {
    let first = payloads.first().ok_or(Error::Empty("payload list"))?;
    if payloads.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} payloads but {} weights",
            payloads.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Config("aggregation weights must be finite and non-negative".into()));
    }
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Config("aggregation weights are all zero".into()));
    }
    for p in payloads {
        if p.mode() != first.mode() || !p.same_layout(first) {
            return Err(Error::Shape("payloads differ in layout".into()));
        }
    }

    let mut mean = first.clone();
    for t in mean.tensors_mut() {
        t.fill(0.0);
    }
    let mut seen = 0.0;
    for (p, &w) in payloads.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        seen += w;
        let f = w / seen;
        for (acc, x) in mean.tensors_mut().into_iter().zip(p.tensors()) {
            for (a, &v) in acc.iter_mut().zip(x) {
                *a += f * (v - *a);
            }
        }
    }
    Ok(mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LoraAdapter, LoraTarget, ModelConfig, ParameterSet};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn config() -> ModelConfig {
        ModelConfig::new(3, 4, 5, &[LoraTarget::Query, LoraTarget::Hidden], 2, 4.0).unwrap()
    }

    fn random_payload(seed: u64) -> Payload {
        Payload::Full(ParameterSet::random(&config(), &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    fn random_adapter(seed: u64) -> LoraAdapter {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut a = LoraAdapter::init(&config(), &mut rng);
        for (_, f) in a.factors.iter_mut() {
            f.b.mapv_inplace(|_| rng.random_range(-1.0..1.0));
        }
        a
    }

    #[test]
    fn weighted_mean_of_two_scalars() {
        let mut zero = random_payload(1);
        let mut four = zero.clone();
        for t in zero.tensors_mut() {
            t.fill(0.0);
        }
        for t in four.tensors_mut() {
            t.fill(4.0);
        }
        let out = aggregate(&[zero, four], &[1.0, 3.0]).unwrap();
        assert!(out.tensors().iter().all(|t| t.iter().all(|&x| x == 3.0)));
    }

    #[test]
    fn identical_payloads_and_single_client_are_fixed_points() {
        let p = random_payload(2);
        let many = vec![p.clone(), p.clone(), p.clone()];
        assert_eq!(aggregate(&many, &[0.7, 1.9, 13.0]).unwrap(), p);
        assert_eq!(aggregate(std::slice::from_ref(&p), &[42.0]).unwrap(), p);
    }

    #[test]
    fn three_adapters_match_the_weighted_sum() {
        let adapters: Vec<LoraAdapter> = (0..3).map(|s| random_adapter(10 + s)).collect();
        let payloads: Vec<Payload> = adapters.iter().cloned().map(Payload::Lora).collect();
        let n = [2.0, 5.0, 3.0];
        let out = aggregate(&payloads, &n).unwrap();
        for (ti, t) in out.tensors().iter().enumerate() {
            for (j, &x) in t.iter().enumerate() {
                let expect: f64 = (0..3).map(|m| n[m] / 10.0 * payloads[m].tensors()[ti][j]).sum();
                assert!((x - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn averaging_factors_differs_from_averaging_products() {
        let a = random_adapter(20);
        let b = random_adapter(21);
        let out = aggregate(&[Payload::Lora(a.clone()), Payload::Lora(b.clone())], &[1.0, 1.0]).unwrap();
        let Payload::Lora(mean) = out else { unreachable!() };
        let t = LoraTarget::Query;
        let product_of_means = mean.delta(t).unwrap();
        let mean_of_products = (a.delta(t).unwrap() + b.delta(t).unwrap()) / 2.0;
        let gap = (&product_of_means - &mean_of_products).mapv(f64::abs).sum();
        assert!(gap > 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = random_payload(3);
        let q = Payload::Lora(random_adapter(4));
        assert!(aggregate(&[], &[]).is_err());
        assert!(aggregate(std::slice::from_ref(&p), &[]).is_err());
        assert!(aggregate(&[p.clone(), p.clone()], &[0.0, 0.0]).is_err());
        assert!(aggregate(std::slice::from_ref(&p), &[-1.0]).is_err());
        assert!(aggregate(&[p, q], &[1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(seeds in prop::collection::vec(0u64..1000, 2..6), ws in prop::collection::vec(0.1f64..10.0, 6), rot in 0usize..6) {
            let k = seeds.len();
            let payloads: Vec<Payload> = seeds.iter().map(|&s| random_payload(s)).collect();
            let w = &ws[..k];
            let a = aggregate(&payloads, w).unwrap();
            let mut idx: Vec<usize> = (0..k).collect();
            idx.rotate_left(rot % k);
            idx.swap(0, k - 1);
            let pp: Vec<Payload> = idx.iter().map(|&i| payloads[i].clone()).collect();
            let pw: Vec<f64> = idx.iter().map(|&i| w[i]).collect();
            let b = aggregate(&pp, &pw).unwrap();
            for (x, y) in a.tensors().iter().zip(b.tensors()) {
                for (u, v) in x.iter().zip(y) {
                    prop_assert!((u - v).abs() < 1e-12);
                }
            }
        }
    }
}
