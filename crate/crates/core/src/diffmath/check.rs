//! Central finite-difference oracle for analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::graph::{backprop, Graph, Var};
use crate::diffmath::params::ParamSet;
use crate::error::{Error, Result};

/// Denominator floor of the relative error.
pub const REL_ERR_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct GradReport {
    pub step: f64,
    pub params: Vec<ParamReport>,
    /// Scalars whose step was reduced to keep the discrete structure fixed.
    #[serde(default)]
    pub shrunk: usize,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn max_abs_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_abs_err).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.iter().any(|p| p.name == name)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CheckConfig {
    pub step: f64,
    /// Check every scalar when the model has at most this many trainable
    /// scalars; otherwise a seeded subsample of this size.
    pub budget: usize,
    pub seed: u64,
    /// Use the fourth-order five-point stencil instead of the two-point one.
    pub five_point: bool,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, budget: 400, seed: 0, five_point: false }
    }
}

/// Compares reverse-mode gradients of `forward` against finite differences
/// over the trainable scalars of `params`.
///
/// `forward` must be deterministic: it is re-run for every perturbed scalar.
pub fn finite_diff_check<F>(params: &ParamSet, cfg: CheckConfig, mut forward: F) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &ParamSet) -> Result<Var>,
{
    finite_diff_check_structured(params, cfg, |g, set| Ok((forward(g, set)?, 0)))
}

/// Like [`finite_diff_check`] for piecewise-smooth losses. `forward` also
/// returns a fingerprint of its discrete structure (for CIF, the firing
/// events). When a stencil point changes the fingerprint, the step for that
/// scalar is quartered, down to `cfg.step / 4⁶`.
pub fn finite_diff_check_structured<F>(params: &ParamSet, cfg: CheckConfig, mut forward: F) -> Result<GradReport>
where
    F: FnMut(&mut Graph, &ParamSet) -> Result<(Var, u64)>,
{
    let mut g = Graph::new();
    let (loss, base) = forward(&mut g, params)?;
    let analytic = backprop(&g, loss, params)?;
    drop(g);

    let total = params.num_trainable_scalars();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut eval = |set: &ParamSet| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let (l, fp) = forward(&mut g, set)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(Error::NonFinite { value: v, context: "in perturbed forward".into() });
        }
        Ok((v, fp))
    };

    let mut report = GradReport { step: cfg.step, params: Vec::new(), shrunk: 0 };
    for (id, p) in params.iter() {
        if !p.trainable() {
            continue;
        }
        let n = p.value().len();
        let picks: Vec<usize> = if total <= cfg.budget {
            (0..n).collect()
        } else {
            let k = ((cfg.budget * n).div_ceil(total)).clamp(1, n);
            let mut v = sample(&mut rng, n, k).into_vec();
            v.sort_unstable();
            v
        };
        let zero = crate::matrix::Matrix::zeros(p.value().rows(), p.value().cols());
        let ga = analytic.get(id).unwrap_or(&zero);
        let mut pr = ParamReport {
            name: p.name().to_string(),
            checked: picks.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            analytic_norm: 0.0,
            numeric_norm: 0.0,
        };
        let (mut an, mut nn) = (0.0, 0.0);
        for &k in &picks {
            let orig = work.get(id).data()[k];
            let offsets: &[f64] = if cfg.five_point { &[1.0, -1.0, 2.0, -2.0] } else { &[1.0, -1.0] };
            let mut h = cfg.step;
            let mut tries = 0;
            let numeric = loop {
                let mut vals = [0.0; 4];
                let mut same = true;
                for (v, &o) in vals.iter_mut().zip(offsets) {
                    work.get_mut(id).data_mut()[k] = orig + o * h;
                    let (l, fp) = eval(&work)?;
                    *v = l;
                    same &= fp == base;
                }
                work.get_mut(id).data_mut()[k] = orig;
                if same || tries == 6 {
                    if tries > 0 {
                        report.shrunk += 1;
                    }
                    break if cfg.five_point {
                        (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * h)
                    } else {
                        (vals[0] - vals[1]) / (2.0 * h)
                    };
                }
                h /= 4.0;
                tries += 1;
            };
            let a = ga.data()[k];
            pr.max_rel_err = pr.max_rel_err.max(relative_error(a, numeric));
            pr.max_abs_err = pr.max_abs_err.max((a - numeric).abs());
            an += a * a;
            nn += numeric * numeric;
        }
        pr.analytic_norm = an.sqrt();
        pr.numeric_norm = nn.sqrt();
        report.params.push(pr);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    #[test]
    fn quadratic_bowl() {
        let mut set = ParamSet::new();
        let w = set.add("w", Matrix::column(&[1.0, 2.0]), true);
        let rep = finite_diff_check(&set, CheckConfig::default(), |g, s| {
            let v = g.param(s, w);
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert_eq!(rep.params.len(), 1);
        assert!(rep.max_abs_err() < 1e-9, "{rep:?}");
        let mut g = Graph::new();
        let v = g.param(&set, w);
        let sq = g.mul(v, v).unwrap();
        let l = g.sum(sq);
        let grads = backprop(&g, l, &set).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn frozen_parameters_are_absent_from_report() {
        let mut set = ParamSet::new();
        let a = set.add("trained", Matrix::column(&[0.3, -0.2]), true);
        let b = set.add("frozen", Matrix::column(&[1.5, 0.5]), false);
        let rep = finite_diff_check(&set, CheckConfig::default(), |g, s| {
            let (va, vb) = (g.param(s, a), g.param(s, b));
            let p = g.mul(va, vb)?;
            let t = g.tanh(p);
            Ok(g.sum(t))
        })
        .unwrap();
        assert!(rep.contains("trained"));
        assert!(!rep.contains("frozen"));
        assert!(rep.max_rel_err() < 1e-6);
    }

    #[test]
    fn subsampling_respects_budget() {
        let mut set = ParamSet::new();
        let a = set.add("big", Matrix::filled(30, 30, 0.1), true);
        let cfg = CheckConfig { budget: 50, ..Default::default() };
        let rep = finite_diff_check(&set, cfg, |g, s| {
            let v = g.param(s, a);
            let e = g.exp(v);
            Ok(g.sum(e))
        })
        .unwrap();
        assert_eq!(rep.checked(), 50);
    }

    #[test]
    fn structure_changes_shrink_the_step() {
        let mut set = ParamSet::new();
        let a = set.add("a", Matrix::scalar(0.004), true);
        let cfg = CheckConfig { step: 1e-2, five_point: true, ..Default::default() };
        let rep = finite_diff_check_structured(&set, cfg, |g, s| {
            let v = g.param(s, a);
            let sign = u64::from(g.value(v).item() > 0.0);
            Ok((g.abs(v), sign))
        })
        .unwrap();
        assert_eq!(rep.shrunk, 1);
        assert!(rep.max_abs_err() < 1e-12, "{rep:?}");
    }

    #[test]
    fn non_finite_perturbation_is_rejected() {
        let mut set = ParamSet::new();
        // log(x) at x = 1e-6 becomes NaN once the step pushes x below zero.
        let a = set.add("a", Matrix::scalar(1e-6), true);
        let cfg = CheckConfig { step: 1e-5, ..Default::default() };
        let res = finite_diff_check(&set, cfg, |g, s| {
            let v = g.param(s, a);
            Ok(g.log(v))
        });
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }
}
