use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::config::{LoraTarget, ModelConfig};
use crate::error::{Error, Result};

/// Uniform access to every trainable scalar of a container, in a fixed order.
///
/// Optimizers and the aggregation step operate on these flat slices, so two
/// containers are compatible exactly when their slice lengths agree.
pub trait Tensors {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn same_layout<T: Tensors + ?Sized>(&self, other: &T) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }
}

fn slice2(m: &Array2<f64>) -> &[f64] {
    m.as_slice().expect("parameter matrices are kept in standard layout")
}

fn slice2_mut(m: &mut Array2<f64>) -> &mut [f64] {
    m.as_slice_mut().expect("parameter matrices are kept in standard layout")
}

fn slice1(v: &Array1<f64>) -> &[f64] {
    v.as_slice().expect("parameter vectors are contiguous")
}

fn slice1_mut(v: &mut Array1<f64>) -> &mut [f64] {
    v.as_slice_mut().expect("parameter vectors are contiguous")
}

/// All backbone weights.
///
/// Tensor order (also the checkpoint order): `w_enc`, `embedding`, `w_q`,
/// `w_h`, `b_h`, `w_o`, `b_o`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    /// `d_h × d_f`
    pub w_enc: Array2<f64>,
    /// `V × d_h`
    pub embedding: Array2<f64>,
    /// `d_h × d_h`
    pub w_q: Array2<f64>,
    /// `d_h × 2·d_h`, acting on `[embedding; context]`
    pub w_h: Array2<f64>,
    pub b_h: Array1<f64>,
    /// `V × d_h`
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
}

impl ParameterSet {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (df, dh, v) = (config.feature_dim, config.hidden_dim, config.vocab_size);
        ParameterSet {
            w_enc: Array2::zeros((dh, df)),
            embedding: Array2::zeros((v, dh)),
            w_q: Array2::zeros((dh, dh)),
            w_h: Array2::zeros((dh, 2 * dh)),
            b_h: Array1::zeros(dh),
            w_o: Array2::zeros((v, dh)),
            b_o: Array1::zeros(v),
        }
    }

    /// Gaussian initialization scaled by `1/√fan_in`; embeddings are unit
    /// Gaussian and biases zero.
    pub fn random<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(config);
        let mut fill = |m: &mut Array2<f64>, scale: f64| {
            for x in m.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *x = z * scale;
            }
        };
        let df = config.feature_dim as f64;
        let dh = config.hidden_dim as f64;
        fill(&mut p.w_enc, 1.0 / df.sqrt());
        fill(&mut p.embedding, 1.0);
        fill(&mut p.w_q, 1.0 / dh.sqrt());
        fill(&mut p.w_h, 1.0 / (2.0 * dh).sqrt());
        fill(&mut p.w_o, 1.0 / dh.sqrt());
        p
    }

    pub fn target(&self, t: LoraTarget) -> &Array2<f64> {
        match t {
            LoraTarget::Enc => &self.w_enc,
            LoraTarget::Query => &self.w_q,
            LoraTarget::Hidden => &self.w_h,
            LoraTarget::Output => &self.w_o,
        }
    }

    pub fn target_mut(&mut self, t: LoraTarget) -> &mut Array2<f64> {
        match t {
            LoraTarget::Enc => &mut self.w_enc,
            LoraTarget::Query => &mut self.w_q,
            LoraTarget::Hidden => &mut self.w_h,
            LoraTarget::Output => &mut self.w_o,
        }
    }

    /// Whether every tensor has the shape `config` prescribes.
    pub fn matches(&self, config: &ModelConfig) -> bool {
        let z = Self::zeros(config);
        self.w_enc.dim() == z.w_enc.dim()
            && self.embedding.dim() == z.embedding.dim()
            && self.w_q.dim() == z.w_q.dim()
            && self.w_h.dim() == z.w_h.dim()
            && self.b_h.dim() == z.b_h.dim()
            && self.w_o.dim() == z.w_o.dim()
            && self.b_o.dim() == z.b_o.dim()
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.matches(config) {
            Ok(())
        } else {
            Err(Error::Shape("parameter set does not match model config".into()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

impl Tensors for ParameterSet {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![
            slice2(&self.w_enc),
            slice2(&self.embedding),
            slice2(&self.w_q),
            slice2(&self.w_h),
            slice1(&self.b_h),
            slice2(&self.w_o),
            slice1(&self.b_o),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            slice2_mut(&mut self.w_enc),
            slice2_mut(&mut self.embedding),
            slice2_mut(&mut self.w_q),
            slice2_mut(&mut self.w_h),
            slice1_mut(&mut self.b_h),
            slice2_mut(&mut self.w_o),
            slice1_mut(&mut self.b_o),
        ]
    }
}

/// Low-rank factors for one target matrix: the update is `(α/r)·B·A`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraFactors {
    /// `r × cols`
    pub a: Array2<f64>,
    /// `rows × r`
    pub b: Array2<f64>,
}

/// A set of LoRA factors, one pair per targeted matrix, in target order.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub factors: Vec<(LoraTarget, LoraFactors)>,
}

impl LoraAdapter {
    pub fn zeros(config: &ModelConfig) -> Self {
        let r = config.lora_rank;
        let factors = config
            .lora_targets
            .iter()
            .map(|&t| {
                let (rows, cols) = t.shape(config);
                (
                    t,
                    LoraFactors {
                        a: Array2::zeros((r, cols)),
                        b: Array2::zeros((rows, r)),
                    },
                )
            })
            .collect();
        LoraAdapter {
            rank: r,
            alpha: config.lora_alpha,
            factors,
        }
    }

    /// `A ~ U(−1/√cols, 1/√cols)`, `B = 0`, so the initial update is zero.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Self {
        let mut adapter = Self::zeros(config);
        for (_, f) in adapter.factors.iter_mut() {
            let bound = 1.0 / (f.a.ncols() as f64).sqrt();
            let dist = Uniform::new(-bound, bound).expect("bound is positive");
            for x in f.a.iter_mut() {
                *x = dist.sample(rng);
            }
        }
        adapter
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn get(&self, t: LoraTarget) -> Option<&LoraFactors> {
        self.factors.iter().find(|(x, _)| *x == t).map(|(_, f)| f)
    }

    pub fn get_mut(&mut self, t: LoraTarget) -> Option<&mut LoraFactors> {
        self.factors.iter_mut().find(|(x, _)| *x == t).map(|(_, f)| f)
    }

    /// The dense update `(α/r)·B·A` for target `t`, if adapted.
    pub fn delta(&self, t: LoraTarget) -> Option<Array2<f64>> {
        self.get(t).map(|f| f.b.dot(&f.a) * self.scale())
    }

    pub fn matches(&self, config: &ModelConfig) -> bool {
        let z = Self::zeros(config);
        self.rank == z.rank
            && self.factors.len() == z.factors.len()
            && self.factors.iter().zip(&z.factors).all(|((t, f), (u, g))| {
                t == u && f.a.dim() == g.a.dim() && f.b.dim() == g.b.dim()
            })
    }

    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.matches(config) && self.alpha == config.lora_alpha {
            Ok(())
        } else {
            Err(Error::Shape("adapter does not match model config".into()))
        }
    }
}

impl Tensors for LoraAdapter {
    fn tensors(&self) -> Vec<&[f64]> {
        self.factors
            .iter()
            .flat_map(|(_, f)| [slice2(&f.a), slice2(&f.b)])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.factors
            .iter_mut()
            .flat_map(|(_, f)| [slice2_mut(&mut f.a), slice2_mut(&mut f.b)])
            .collect()
    }
}

/// Folds an adapter into the backbone: `W ← W + (α/r)·B·A` for each target.
pub fn merge(params: &ParameterSet, adapter: &LoraAdapter) -> Result<ParameterSet> {
    let mut merged = params.clone();
    for (t, _) in &adapter.factors {
        let delta = adapter.delta(*t).expect("target present");
        let w = merged.target_mut(*t);
        if w.dim() != delta.dim() {
            return Err(Error::Shape(format!(
                "adapter for {} has shape {:?}, target is {:?}",
                t.name(),
                delta.dim(),
                w.dim()
            )));
        }
        *w += &delta;
    }
    Ok(merged)
}
