//! Connectionist temporal classification: log-space forward–backward loss,
//! greedy decoding and the CTC recogniser used by the cascade.

use rand::Rng;

use crate::diffmath::{init_uniform, log_sum_exp, Graph, ParamId, ParamSet, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// `−log p(target | log_probs)` and the per-frame label posteriors
/// (the gradient of the loss with respect to `log_probs` is their negation).
///
/// `log_probs` is T×(V+1) with the blank in the last column.
pub fn ctc_forward_backward(log_probs: &Matrix, target: &[usize]) -> Result<(f64, Matrix)> {
    let (t_len, k) = log_probs.shape();
    if k < 2 {
        return Err(Error::Shape { op: "ctc (need a blank column)", lhs: (t_len, k), rhs: (t_len, 2) });
    }
    let blank = k - 1;
    if let Some(&bad) = target.iter().find(|&&c| c >= blank) {
        return Err(Error::UnknownToken(bad));
    }
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    if t_len < target.len() + repeats || t_len == 0 {
        return Err(Error::InfeasibleAlignment { frames: t_len, labels: target.len() });
    }
    // Extended label sequence: blank, l1, blank, l2, …, blank.
    let ext: Vec<usize> = std::iter::once(blank).chain(target.iter().flat_map(|&c| [c, blank])).collect();
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];
    let lp = |t: usize, s: usize| log_probs.get(t, ext[s]);
    let neg = f64::NEG_INFINITY;

    let mut alpha = vec![neg; t_len * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut terms = vec![prev[s]];
            if s >= 1 {
                terms.push(prev[s - 1]);
            }
            if skip(s) {
                terms.push(prev[s - 2]);
            }
            alpha[t * s_len + s] = log_sum_exp(&terms) + lp(t, s);
        }
    }
    let last = (t_len - 1) * s_len;
    let ends: Vec<f64> = if s_len > 1 { vec![alpha[last + s_len - 1], alpha[last + s_len - 2]] } else { vec![alpha[last]] };
    let log_p = log_sum_exp(&ends);
    if log_p == neg {
        return Err(Error::InfeasibleAlignment { frames: t_len, labels: target.len() });
    }

    let mut beta = vec![neg; t_len * s_len];
    beta[last + s_len - 1] = lp(t_len - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(t_len - 1, s_len - 2);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut terms = vec![next[s]];
            if s + 1 < s_len {
                terms.push(next[s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                terms.push(next[s + 2]);
            }
            beta[t * s_len + s] = log_sum_exp(&terms) + lp(t, s);
        }
    }

    // α and β both include the emission at t, so subtract it once.
    let mut post = Matrix::zeros(t_len, k);
    for t in 0..t_len {
        let mut per_label: Vec<Vec<f64>> = vec![Vec::new(); k];
        for s in 0..s_len {
            let v = alpha[t * s_len + s] + beta[t * s_len + s] - lp(t, s);
            if v > neg {
                per_label[ext[s]].push(v);
            }
        }
        for (c, vs) in per_label.iter().enumerate() {
            if !vs.is_empty() {
                post.set(t, c, (log_sum_exp(vs) - log_p).exp());
            }
        }
    }
    Ok((-log_p, post))
}

pub fn ctc_loss(log_probs: &Matrix, target: &[usize]) -> Result<f64> {
    ctc_forward_backward(log_probs, target).map(|(l, _)| l)
}

/// CTC loss of `logits` (T×(V+1), unnormalised) as a graph node.
///
/// The node's value is the exact loss; its gradient with respect to the
/// log-softmax output is the negated posterior, computed by forward–backward.
pub fn ctc_loss_graph(g: &mut Graph, logits: Var, target: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits);
    let (loss, post) = ctc_forward_backward(g.value(lp), target)?;
    let lpv = g.value(lp);
    let linear: f64 = lpv.data().iter().zip(post.data()).map(|(a, p)| -a * p).sum();
    let entries = post.data().iter().enumerate().filter(|(_, &p)| p != 0.0).map(|(i, &p)| (0, i, -p)).collect();
    g.weighted(lp, 1, 1, entries, Some(Matrix::scalar(loss - linear)))
}

/// Frame-wise argmax, repeats collapsed, blanks removed. Ties go to the lower id.
pub fn ctc_greedy_decode(log_probs: &Matrix) -> Vec<usize> {
    let blank = log_probs.cols().saturating_sub(1);
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..log_probs.rows() {
        let c = log_probs.argmax_row(t);
        if Some(c) != prev && c != blank {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// Encoder plus an output layer over the LM vocabulary and a trailing blank.
#[derive(Clone, Debug)]
pub struct CtcModel {
    pub encoder: Encoder,
    out_w: ParamId,
    out_b: ParamId,
    vocab: usize,
}

impl CtcModel {
    pub fn register(params: &mut ParamSet, cfg: EncoderConfig, vocab: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_out;
        let encoder = Encoder::register(params, "enc", cfg, rng)?;
        let out_w = params.add("ctc.out.w", init_uniform(rng, d, vocab + 1, d), true);
        let out_b = params.add("ctc.out.b", Matrix::zeros(1, vocab + 1), true);
        Ok(Self { encoder, out_w, out_b, vocab })
    }

    pub fn blank(&self) -> usize {
        self.vocab
    }

    /// Unnormalised logits, T×(V+1).
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let e = self.encoder.forward(g, params, x)?;
        let w = g.param(params, self.out_w);
        let b = g.param(params, self.out_b);
        let y = g.matmul(e, w)?;
        g.add(y, b)
    }

    pub fn log_probs(&self, params: &ParamSet, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let l = self.forward(&mut g, params, xv)?;
        let lp = g.log_softmax(l);
        Ok(g.value(lp).clone())
    }

    pub fn transcribe(&self, params: &ParamSet, x: &Matrix) -> Result<Vec<usize>> {
        Ok(ctc_greedy_decode(&self.log_probs(params, x)?))
    }
}
