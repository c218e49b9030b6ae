use serde::{Deserialize, Serialize};

use crate::diffmath::{log_sum_exp, Graph, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Loss components of one batch. `total = ce + γ·mse + μ·qua`, where γ is
/// zero under the fine-tuning regime.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub mse: f64,
    pub qua: f64,
}

impl LossBreakdown {
    pub fn compose(ce: f64, mse: f64, qua: f64, gamma: f64, mu: f64) -> Self {
        Self { total: ce + gamma * mse + mu * qua, ce, mse, qua }
    }

    pub(crate) fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.total += s * other.total;
        self.ce += s * other.ce;
        self.mse += s * other.mse;
        self.qua += s * other.qua;
    }
}

/// Σₘ mean over columns of (sₘ − pₘ)².
pub fn mse_loss(s: &Matrix, p: &Matrix) -> Result<f64> {
    check_mse_shapes(s.shape(), p.shape())?;
    let d = s.cols().max(1) as f64;
    Ok(s.data().iter().zip(p.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d)
}

fn check_mse_shapes(s: (usize, usize), p: (usize, usize)) -> Result<()> {
    if s.0 != p.0 {
        return Err(Error::LengthMismatch { what: "representations vs embedding targets", left: s.0, right: p.0 });
    }
    if s.1 != p.1 {
        return Err(Error::Shape { op: "mse", lhs: s, rhs: p });
    }
    Ok(())
}

pub fn mse_loss_graph(g: &mut Graph, s: Var, p: Var) -> Result<Var> {
    check_mse_shapes(g.value(s).shape(), g.value(p).shape())?;
    let d = g.value(s).cols().max(1) as f64;
    let diff = g.sub(s, p)?;
    let sq = g.mul(diff, diff)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / d))
}

/// Mean negative log-likelihood of `targets` under the first
/// `targets.len()` rows of `logits`.
pub fn ce_loss(logits: &Matrix, targets: &[usize]) -> Result<f64> {
    if targets.len() > logits.rows() {
        return Err(Error::TargetTooLong { target: targets.len(), span: logits.rows() });
    }
    if targets.is_empty() {
        return Err(Error::Empty("cross-entropy targets"));
    }
    let mut sum = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        if t >= row.len() {
            return Err(Error::UnknownToken(t));
        }
        sum += log_sum_exp(row) - row[t];
    }
    Ok(sum / targets.len() as f64)
}

/// Cross-entropy summed over `(row, target)` picks of `logits`, divided by `denom`.
pub(crate) fn ce_picks_graph(g: &mut Graph, logits: Var, picks: &[(usize, usize)], denom: usize) -> Result<Var> {
    let (rows, v) = g.value(logits).shape();
    if picks.is_empty() {
        return Err(Error::Empty("cross-entropy targets"));
    }
    if let Some(&(r, _)) = picks.iter().find(|p| p.0 >= rows) {
        return Err(Error::TargetTooLong { target: r + 1, span: rows });
    }
    if let Some(&(_, t)) = picks.iter().find(|p| p.1 >= v) {
        return Err(Error::UnknownToken(t));
    }
    let idx: Vec<usize> = picks.iter().map(|p| p.0).collect();
    let sel = g.gather_rows(logits, &idx)?;
    let lp = g.log_softmax(sel);
    let w = -1.0 / denom as f64;
    let entries = picks.iter().enumerate().map(|(i, &(_, t))| (0, i * v + t, w)).collect();
    g.weighted(lp, 1, 1, entries, None)
}

/// Graph form of [`ce_loss`] over rows `start..start + targets.len()`.
pub fn ce_loss_graph(g: &mut Graph, logits: Var, start: usize, targets: &[usize]) -> Result<Var> {
    let rows = g.value(logits).rows();
    if start + targets.len() > rows {
        return Err(Error::TargetTooLong { target: targets.len(), span: rows.saturating_sub(start) });
    }
    let picks: Vec<(usize, usize)> = targets.iter().enumerate().map(|(j, &t)| (start + j, t)).collect();
    ce_picks_graph(g, logits, &picks, targets.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_examples() {
        let s = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(mse_loss(&s, &Matrix::zeros(1, 2)).unwrap(), 1.0);
        assert_eq!(mse_loss(&s, &s).unwrap(), 0.0);
        assert!(matches!(mse_loss(&s, &Matrix::zeros(2, 2)), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn ce_examples() {
        let uniform = Matrix::zeros(3, 40);
        assert!((ce_loss(&uniform, &[1, 2, 3]).unwrap() - 40f64.ln()).abs() < 1e-14);
        let mut sharp = Matrix::filled(1, 40, -1e3);
        sharp.set(0, 7, 1e3);
        assert!(ce_loss(&sharp, &[7]).unwrap() < 1e-300);
        assert!(matches!(ce_loss(&uniform, &[1, 2, 3, 4]), Err(Error::TargetTooLong { .. })));
    }

    #[test]
    fn graph_forms_match() {
        let s = Matrix::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let p = Matrix::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let logits = Matrix::from_vec(5, 6, (0..30).map(|i| (i as f64 * 0.7).sin() * 2.0).collect()).unwrap();
        let mut g = Graph::new();
        let (sv, pv, lv) = (g.input(s.clone()), g.input(p.clone()), g.input(logits.clone()));
        let m = mse_loss_graph(&mut g, sv, pv).unwrap();
        assert!((g.value(m).item() - mse_loss(&s, &p).unwrap()).abs() < 1e-14);
        let c = ce_loss_graph(&mut g, lv, 2, &[4, 0, 5]).unwrap();
        let tail = Matrix::from_vec(3, 6, logits.data()[12..].to_vec()).unwrap();
        assert!((g.value(c).item() - ce_loss(&tail, &[4, 0, 5]).unwrap()).abs() < 1e-14);
        assert!(ce_loss_graph(&mut g, lv, 3, &[1, 1, 1]).is_err());
    }
}
