use serde::{Deserialize, Serialize};

use crate::diffmath::graph::Gradients;
use crate::diffmath::params::ParamSet;
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 5.0 }
    }
}

/// Adam moments for the trainable parameters of one set.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Option<Matrix>>,
    pub v: Vec<Option<Matrix>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet) -> Self {
        let zeros = || -> Vec<Option<Matrix>> {
            params
                .iter()
                .map(|(_, p)| p.trainable().then(|| Matrix::zeros(p.value().rows(), p.value().cols())))
                .collect()
        };
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    /// Clips `grads` to the configured global norm, applies one update and
    /// returns the pre-clip norm.
    pub fn update(&mut self, params: &mut ParamSet, grads: &mut Gradients) -> f64 {
        let norm = grads.global_norm();
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            grads.scale(self.cfg.clip_norm / norm);
        }
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads.iter() {
            let (Some(m), Some(v)) = (self.m[id.index()].as_mut(), self.v[id.index()].as_mut()) else {
                continue;
            };
            let w = params.get_mut(id);
            for (((w, m), v), &g) in w.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *w -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{backprop, Graph};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut set = ParamSet::new();
        let w = set.add("w", Matrix::column(&[1.0, -2.0]), true);
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &set);
        let mut g = Graph::new();
        let v = g.param(&set, w);
        let sq = g.mul(v, v).unwrap();
        let l = g.sum(sq);
        let mut grads = backprop(&g, l, &set).unwrap();
        let norm = opt.update(&mut set, &mut grads);
        assert!((norm - 20f64.sqrt()).abs() < 1e-12);
        // Bias-corrected first step is lr·sign(g) up to eps.
        assert!((set.get(w).data()[0] - 0.9).abs() < 1e-7);
        assert!((set.get(w).data()[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn clipping_rescales_to_limit() {
        let mut set = ParamSet::new();
        let w = set.add("w", Matrix::column(&[30.0, 40.0]), true);
        let mut opt = Adam::new(AdamConfig::default(), &set);
        let mut g = Graph::new();
        let v = g.param(&set, w);
        let sq = g.mul(v, v).unwrap();
        let l = g.sum(sq);
        let mut grads = backprop(&g, l, &set).unwrap();
        let norm = opt.update(&mut set, &mut grads);
        assert!((norm - 100.0).abs() < 1e-9);
        assert!((grads.global_norm() - 5.0).abs() < 1e-12);
    }
}
