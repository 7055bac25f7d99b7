use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// `lr_min + ½(lr_init − lr_min)(1 + cos(πk/K))`, held at `lr_min` past `K`.
pub fn cosine_lr(k: u64, total: u64, lr_init: f64, lr_min: f64) -> f64 {
    let frac = k.min(total) as f64 / total.max(1) as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (PI * frac).cos())
}

/// AdamW with bias correction and decoupled weight decay. Moments are kept
/// per parameter in store order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    #[serde(skip)]
    pub(crate) m: Vec<Vec<f64>>,
    #[serde(skip)]
    pub(crate) v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update of every parameter with learning rate `lr`. Decay applies
    /// only to parameters flagged for it and does not pass through the
    /// adaptive scaling.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::dim(format!(
                "{} gradients / {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                store.len()
            )));
        }
        for (param, g) in store.iter().zip(grads) {
            if g.len() != param.tensor.numel() {
                return Err(Error::dim(format!(
                    "gradient of `{}` has {} entries, parameter has {}",
                    param.name,
                    g.len(),
                    param.tensor.numel()
                )));
            }
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in `{}` at index {pos}",
                    g[pos], param.name
                )));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((param, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let shrink = if param.decay { 1.0 - lr * self.weight_decay } else { 1.0 };
            for (((p, &g), m), v) in param.tensor.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let step = (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
                *p = *p * shrink - lr * step;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        s.add("b", Tensor::new(&[2], vec![0.3, 0.4]).unwrap(), false);
        s
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.01, 1e-6), 0.01);
        assert!((cosine_lr(100, 100, 0.01, 1e-6) - 1e-6).abs() < 1e-12);
        assert!((cosine_lr(50, 100, 0.01, 1e-6) - (0.01 + 1e-6) / 2.0).abs() < 1e-12);
        assert_eq!(cosine_lr(500, 100, 0.01, 1e-6), cosine_lr(100, 100, 0.01, 1e-6));
        for k in 0..100 {
            assert!(cosine_lr(k + 1, 100, 0.01, 1e-6) <= cosine_lr(k, 100, 0.01, 1e-6));
        }
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut s, &[vec![0.0; 3], vec![0.0; 2]], 0.01).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn zero_grads_with_decay_shrink_flagged_params() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.05);
        opt.step(&mut s, &[vec![0.0; 3], vec![0.0; 2]], 0.01).unwrap();
        let factor = 1.0 - 0.01 * 0.05;
        for (a, b) in s
            .iter()
            .next()
            .unwrap()
            .tensor
            .data()
            .iter()
            .zip(before.iter().next().unwrap().tensor.data())
        {
            assert_eq!(*a, b * factor);
        }
        assert_eq!(s.iter().nth(1), before.iter().nth(1));
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = store();
        let before = s.clone();
        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.0);
        let g = vec![vec![0.3, -4.0, 1e-3], vec![-0.02, 7.0]];
        opt.step(&mut s, &g, 0.01).unwrap();
        for ((p, q), g) in s.iter().zip(before.iter()).zip(&g) {
            for ((a, b), g) in p.tensor.data().iter().zip(q.tensor.data()).zip(g) {
                // closed form at t = 1: lr · g / (|g| + eps)
                let want = 0.01 * g / (g.abs() + 1e-8);
                assert!(((b - a) - want).abs() < 1e-15);
                assert!(((b - a) - 0.01 * g.signum()).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = store();
        let mut opt = AdamW::new(&s, 0.9, 0.999, 1e-8, 0.0);
        let err = opt
            .step(&mut s, &[vec![0.0; 3], vec![0.0, f64::NAN]], 0.01)
            .unwrap_err();
        assert!(matches!(&err, Error::Numeric(m) if m.contains("`b`")), "{err}");
        assert_eq!(opt.t, 0);
    }
}
