//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::tape::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
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

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: BTreeMap<String, Tensor>,
    pub second_moment: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Applies one descent step. Parameters without a gradient entry are left untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else { continue };
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            m.zip_mut_with(g, |m, &g| *m = beta1 * *m + (1.0 - beta1) * g);
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.raw_dim()));
            v.zip_mut_with(g, |v, &g| *v = beta2 * *v + (1.0 - beta2) * g * g);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut params = ParamStore::new();
        params.insert("w", arr1(&[1.0, -1.0]).into_dyn());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), arr1(&[0.5, -2.0]).into_dyn());
        let mut adam = Adam::new(AdamConfig::default());
        adam.update(&mut params, &grads);
        let w = params.get("w").unwrap();
        // Bias-corrected first step is lr * sign(g) up to eps.
        assert!((w[[0]] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[[1]] - (-1.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = ParamStore::new();
        params.insert("x", ArrayD::from_elem(ndarray::IxDyn(&[1]), 3.0));
        let mut adam = Adam::new(AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..2000 {
            let x = params.get("x").unwrap()[[0]];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), ArrayD::from_elem(ndarray::IxDyn(&[1]), 2.0 * (x - 1.0)));
            adam.update(&mut params, &grads);
        }
        assert!((params.get("x").unwrap()[[0]] - 1.0).abs() < 1e-3);
    }
}
