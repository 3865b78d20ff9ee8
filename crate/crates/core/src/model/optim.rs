use super::params::Tensors;
use crate::error::{Error, Result};

fn check_layout<P: Tensors + ?Sized, G: Tensors + ?Sized>(params: &P, grads: &G) -> Result<()> {
    if params.same_layout(grads) {
        Ok(())
    } else {
        Err(Error::Shape("gradient layout differs from trainables".into()))
    }
}

/// Plain gradient descent: `θ ← θ − lr·g`.
pub fn sgd_step<P: Tensors + ?Sized, G: Tensors + ?Sized>(
    params: &mut P,
    grads: &G,
    lr: f64,
) -> Result<()> {
    check_layout(params, grads)?;
    for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
        for (x, &d) in p.iter_mut().zip(g) {
            *x -= lr * d;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are sized lazily on the first
/// step and must keep the same layout afterwards.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u32,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    pub fn step<P: Tensors + ?Sized, G: Tensors + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &G,
    ) -> Result<()> {
        check_layout(params, grads)?;
        let n = params.num_scalars();
        if self.step == 0 {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
        } else if self.m.len() != n {
            return Err(Error::Shape("optimizer state layout changed between steps".into()));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        let mut i = 0;
        for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (x, &d) in p.iter_mut().zip(g) {
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                *m = beta1 * *m + (1.0 - beta1) * d;
                *v = beta2 * *v + (1.0 - beta2) * d * d;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
                i += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scalars(Vec<f64>);

    impl Tensors for Scalars {
        fn tensors(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = Scalars(vec![1.5, -2.0]);
        let g = Scalars(vec![0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut p, &g).unwrap();
        adam.step(&mut p, &g).unwrap();
        assert_eq!(p.0, vec![1.5, -2.0]);
        sgd_step(&mut p, &g, 0.5).unwrap();
        assert_eq!(p.0, vec![1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Scalars(vec![0.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(&mut p, &Scalars(vec![1.0])).unwrap();
        // m̂ = 1, v̂ = 1  ⇒  Δ = 0.1 / (1 + 1e-8)
        assert!((p.0[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn two_step_trace_matches_manual_recurrence() {
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let g = 0.3_f64;
        // manual recurrence
        let mut x = 2.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        let mut p = Scalars(vec![2.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(lr));
        adam.step(&mut p, &Scalars(vec![g])).unwrap();
        adam.step(&mut p, &Scalars(vec![g])).unwrap();
        assert!((p.0[0] - x).abs() < 1e-12);
        // with a constant gradient both steps have m̂ = g, v̂ = g²
        assert!((p.0[0] - (2.0 - 2.0 * lr * g / (g + eps))).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = Scalars(vec![0.0, 1.0]);
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        assert!(adam.step(&mut p, &Scalars(vec![1.0])).is_err());
        assert!(sgd_step(&mut p, &Scalars(vec![1.0]), 0.1).is_err());
    }
}
