//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// One Adam update of a single tensor at step `t ≥ 1`, in place.
pub fn adam_update(param: &mut Tensor, grad: &Tensor, moments: &mut Moments, t: u64, cfg: &AdamConfig) {
    debug_assert!(t >= 1);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let p = param.data_mut();
    let m = moments.m.data_mut();
    let v = moments.v.data_mut();
    for (((p, &g), m), v) in p.iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Optimizer state keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    moments: BTreeMap<String, Moments>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            moments: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.moments.get(name)
    }

    /// Applies one step to every parameter. A parameter without an entry in
    /// `grads` is treated as having a zero gradient. Every gradient is
    /// checked before anything is modified, so a rejected step leaves the
    /// parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in params.iter() {
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() {
                    return Err(Error::dim(
                        "adam_step",
                        format!("gradient for {name} is {:?}, parameter is {:?}", g.shape(), p.shape()),
                    ));
                }
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient { param: name.to_string() });
                }
            }
        }
        self.t += 1;
        for (name, p) in params.iter_mut() {
            let moments = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape().to_vec()),
                v: Tensor::zeros(p.shape().to_vec()),
            });
            match grads.get(name) {
                Some(g) => adam_update(p, g, moments, self.t, &self.config),
                None => {
                    let zero = Tensor::zeros(p.shape().to_vec());
                    adam_update(p, &zero, moments, self.t, &self.config);
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state() -> (Tensor, Moments) {
        (
            Tensor::scalar(0.0),
            Moments {
                m: Tensor::scalar(0.0),
                v: Tensor::scalar(0.0),
            },
        )
    }

    #[test]
    fn first_step_is_minus_lr() {
        let cfg = AdamConfig::default();
        let (mut p, mut mo) = scalar_state();
        adam_update(&mut p, &Tensor::scalar(1.0), &mut mo, 1, &cfg);
        let want = -cfg.lr / (1.0 + cfg.eps);
        assert!((p.item() - want).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_steps_approach_lr() {
        let cfg = AdamConfig::default();
        let (mut p, mut mo) = scalar_state();
        let g = Tensor::scalar(-3.0);
        let mut last = 0.0;
        for t in 1..=1000 {
            let before = p.item();
            adam_update(&mut p, &g, &mut mo, t, &cfg);
            last = p.item() - before;
        }
        assert!((last - cfg.lr).abs() < 0.01 * cfg.lr, "{last}");
    }

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = AdamConfig::default();
        let mut p = Tensor::scalar(2.0);
        let mut mo = Moments {
            m: Tensor::scalar(0.0),
            v: Tensor::scalar(0.0),
        };
        adam_update(&mut p, &Tensor::scalar(0.0), &mut mo, 1, &cfg);
        assert_eq!(p.item(), 2.0);
        assert_eq!(mo.m.item(), 0.0);
        assert_eq!(mo.v.item(), 0.0);
    }

    #[test]
    fn nan_gradient_names_parameter_and_changes_nothing() {
        let mut params = ParamStore::new();
        params.insert("a", Tensor::scalar(1.0)).unwrap();
        params.insert("b", Tensor::scalar(1.0)).unwrap();
        let before = params.clone();
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Tensor::scalar(1.0));
        grads.insert("b".to_string(), Tensor::scalar(f64::NAN));
        let mut adam = Adam::new(AdamConfig::default());
        match adam.step(&mut params, &grads) {
            Err(Error::NonFiniteGradient { param }) => assert_eq!(param, "b"),
            other => panic!("{other:?}"),
        }
        assert_eq!(params, before);
        assert_eq!(adam.steps(), 0);
    }

    #[test]
    fn clipping() {
        let mut g = BTreeMap::new();
        g.insert("x".to_string(), Tensor::vector(vec![3.0, 4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["x"].data()[0] - 0.6).abs() < 1e-15);
    }
}
