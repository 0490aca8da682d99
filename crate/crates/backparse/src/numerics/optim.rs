//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;
use crate::numerics::Scalar;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

struct Moments<S: Scalar> {
    m: Vec<S>,
    v: Vec<S>,
}

/// Optimizer state: per-parameter moments plus the step counter.
/// Parameters whose tensor has `requires_grad == false` are never touched,
/// so frozen tensors stay bit-identical across any number of steps.
pub struct AdamW<S: Scalar> {
    pub cfg: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(cfg: AdamWConfig) -> Self {
        assert!(cfg.lr > 0.0, "learning rate must be positive");
        AdamW {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update over the named parameters. `grads` may omit entries
    /// (frozen or unreached parameters); those tensors are left untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grads: &BTreeMap<String, Vec<S>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = S::from_f64(self.cfg.beta1);
        let b2 = S::from_f64(self.cfg.beta2);
        let one = S::one();
        let lr = S::from_f64(self.cfg.lr);
        let eps = S::from_f64(self.cfg.eps);
        let wd = S::from_f64(self.cfg.weight_decay);
        let bc1 = S::from_f64(1.0 - self.cfg.beta1.powi(t));
        let bc2 = S::from_f64(1.0 - self.cfg.beta2.powi(t));

        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else {
                return Err(Error::Config(format!("gradient for unknown parameter '{name}'")));
            };
            if !p.requires_grad {
                continue;
            }
            if grad.len() != p.data.len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape.clone(),
                    rhs: vec![grad.len()],
                });
            }
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![S::zero(); grad.len()],
                v: vec![S::zero(); grad.len()],
            });
            if mom.m.len() != grad.len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: vec![mom.m.len()],
                    rhs: vec![grad.len()],
                });
            }
            for i in 0..grad.len() {
                let g = grad[i];
                mom.m[i] = b1 * mom.m[i] + (one - b1) * g;
                mom.v[i] = b2 * mom.v[i] + (one - b2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                let update = m_hat / (v_hat.sqrt() + eps) + wd * p.data[i];
                p.data[i] = p.data[i] - lr * update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(v: f64, requires_grad: bool) -> BTreeMap<String, Tensor<f64>> {
        let mut m = BTreeMap::new();
        m.insert(
            "p".to_string(),
            Tensor::new(vec![1], vec![v]).with_grad(requires_grad),
        );
        m
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // g=1, lr=0.1, defaults betas, wd=0: bias-corrected step is
        // lr * 1/(1+eps) which is ~0.1.
        let mut params = single_param(1.0, true);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            ..Default::default()
        });
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![1.0]);
        opt.step(&mut params, &grads).unwrap();
        let p = params["p"].data[0];
        assert!((p - 0.9).abs() < 1e-6, "p = {p}");
    }

    #[test]
    fn zero_grad_and_zero_decay_leaves_param_unchanged() {
        let mut params = single_param(0.7, true);
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![0.0]);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params["p"].data[0], 0.7);
    }

    #[test]
    fn frozen_param_is_bit_identical_despite_gradient() {
        let mut params = single_param(0.3, false);
        let before = params["p"].data[0].to_bits();
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("p".to_string(), vec![5.0]);
        for _ in 0..100 {
            opt.step(&mut params, &grads).unwrap();
        }
        assert_eq!(params["p"].data[0].to_bits(), before);
    }

    #[test]
    fn step_counter_is_monotone() {
        let mut params = single_param(0.0, true);
        let mut opt = AdamW::<f64>::new(AdamWConfig::default());
        let grads = BTreeMap::new();
        for i in 1..=5 {
            opt.step(&mut params, &grads).unwrap();
            assert_eq!(opt.step_count(), i);
        }
    }
}
