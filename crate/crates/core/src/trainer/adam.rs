use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: Some(5.0),
        }
    }
}

/// Bias-corrected Adam over every trainable parameter of a store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Applies one update and returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) -> Result<f64> {
        if grads.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        let mut sq = 0.0;
        for ((_, p), g) in store.iter().zip(grads) {
            if g.shape() != p.value.shape() {
                return Err(Error::dim("adam", g.shape(), p.value.shape()));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient { path: p.name.clone() });
            }
            if p.trainable {
                sq += g.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        let scale = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grads[k].data()).zip(m).zip(v) {
                let g = g.as_f64() * scale;
                let mm = beta1 * m.as_f64() + (1.0 - beta1) * g;
                let vv = beta2 * v.as_f64() + (1.0 - beta2) * g * g;
                *m = T::lit(mm);
                *v = T::lit(vv);
                let update = lr * (mm / c1) / ((vv / c2).sqrt() + eps);
                *w = T::lit(w.as_f64() - update);
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(p)).unwrap();
        s
    }

    #[test]
    fn first_step_closed_form() {
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        adam.step(&mut store, &[Tensor::scalar(1.0)], 0.1).unwrap();
        let p = store.iter().next().unwrap().1.value.data()[0];
        assert!((p + 0.1).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut store = scalar_store(0.7);
        let mut adam = Adam::new(&store, AdamConfig::default());
        for _ in 0..3 {
            adam.step(&mut store, &[Tensor::scalar(0.0)], 0.1).unwrap();
        }
        assert_eq!(store.iter().next().unwrap().1.value.data()[0], 0.7);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = scalar_store(0.0);
        let mut adam = Adam::new(&store, AdamConfig::default());
        let err = adam
            .step(&mut store, &[Tensor::scalar(f64::NAN)], 0.1)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { path } if path == "p"));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut store = scalar_store(0.0);
        let cfg = AdamConfig {
            clip_norm: Some(1.0),
            ..AdamConfig::default()
        };
        let mut adam = Adam::new(&store, cfg);
        let norm = adam.step(&mut store, &[Tensor::scalar(-30.0)], 0.1).unwrap();
        assert_eq!(norm, 30.0);
        assert!((adam.m[0].data()[0] + 0.1).abs() < 1e-15);
    }
}
