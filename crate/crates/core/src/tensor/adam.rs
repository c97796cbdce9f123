use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Step learning-rate schedule: `initial` until `drop_step`, then
/// `initial * drop_factor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub drop_factor: f64,
    pub drop_step: usize,
}

impl LrSchedule {
    /// Learning rate used for the update with zero-based index `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.drop_step {
            self.initial * self.drop_factor
        } else {
            self.initial
        }
    }
}

/// Moment estimates for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamState<T: Real = f32> {
    pub config: AdamConfig,
    pub lr: f64,
    pub step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig, lr: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, t)| Tensor::zeros(t.shape()))
                .collect::<Vec<_>>()
        };
        AdamState {
            config,
            lr,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one bias-corrected Adam update. `grads` is indexed like the
    /// store; `None` entries are treated as zero gradients. Non-finite
    /// gradients abort before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::invalid(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                let id = super::ParamId(i);
                g.expect_shape("adam gradient", store.get(id).shape())?;
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "gradient of {} at step {}",
                        store.name(id),
                        self.step + 1
                    )));
                }
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (b1, b2) = (T::from_f64(beta1), T::from_f64(beta2));
        let step_size = T::from_f64(self.lr / bc1);
        let bc2_sqrt = T::from_f64(bc2.sqrt());
        let eps = T::from_f64(eps);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(super::ParamId(i)).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (T::one() - b1) * gk;
                v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
                p[k] -= step_size * m[k] / (v[k].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::from_vec(&[values.len()], values.to_vec()).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = store_with(&[0.5, -1.0, 2.0]);
        let mut adam = AdamState::new(&store, AdamConfig::default(), 1e-3);
        adam.step(&mut store, &[Some(Tensor::ones(&[3]))]).unwrap();
        let want = [0.5 - 1e-3, -1.0 - 1e-3, 2.0 - 1e-3];
        for (p, w) in store.get(super::super::ParamId(0)).data().iter().zip(want) {
            // |g| / sqrt(g^2) = 1, only eps perturbs the step
            assert!((p - w).abs() < 1e-10, "{p} vs {w}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = store_with(&[0.5, -1.0]);
        let before = store.clone();
        let mut adam = AdamState::new(&store, AdamConfig::default(), 1e-3);
        adam.step(&mut store, &[Some(Tensor::zeros(&[2]))]).unwrap();
        assert_eq!(store.get(super::super::ParamId(0)), before.get(super::super::ParamId(0)));
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut store = store_with(&[0.5]);
        let mut adam = AdamState::new(&store, AdamConfig::default(), 1e-3);
        let err = adam
            .step(&mut store, &[Some(Tensor::full(&[1], f64::NAN))])
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert_eq!(store.get(super::super::ParamId(0)).item(), 0.5);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn schedule_drops_at_boundary() {
        let s = LrSchedule {
            initial: 1.5e-3,
            drop_factor: 0.1,
            drop_step: 80_000,
        };
        assert_eq!(s.lr_at(0), 1.5e-3);
        assert_eq!(s.lr_at(79_999), 1.5e-3);
        assert!((s.lr_at(80_000) - 1.5e-4).abs() < 1e-18);
        assert!((s.lr_at(99_999) - 1.5e-4).abs() < 1e-18);
    }
}
