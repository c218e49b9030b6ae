//! Continuous integrate-and-fire.
//!
//! Per-frame firing weights are accumulated left to right. When the running
//! sum reaches the threshold the straddling frame's weight is split: one part
//! closes the current event at exactly the threshold, the remainder seeds the
//! next one. Each event pools the content columns of its frames, weighted by
//! their contributions, and a learned affine map takes pooled vectors into
//! the language model's embedding space.
//!
//! The event structure (which frames feed which event) is piecewise constant
//! in the weights. Gradients treat it as fixed and flow through the
//! contribution weights, each of which is an affine function of the weights
//! given the structure.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::diffmath::{sigmoid, Graph, ParamId, ParamSet, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const DEFAULT_THRESHOLD: f64 = 1.0;

/// Accumulations within this distance of the threshold fire, and residuals
/// below it count as zero.
pub const FIRE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightMode {
    Raw,
    Scaled { target_len: usize },
}

impl WeightMode {
    fn name(self) -> &'static str {
        match self {
            WeightMode::Raw => "raw",
            WeightMode::Scaled { .. } => "scaled",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FiringWeights {
    alphas: Vec<f64>,
    mode: WeightMode,
}

impl FiringWeights {
    /// Raw weights from explicit values, each in (0, 1).
    pub fn raw(alphas: Vec<f64>) -> Self {
        Self { alphas, mode: WeightMode::Raw }
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn mode(&self) -> WeightMode {
        self.mode
    }

    pub fn total(&self) -> f64 {
        self.alphas.iter().sum()
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TailPolicy {
    AlwaysFire,
    Drop,
    /// Fire the trailing partial accumulation when its mass is at least half
    /// the threshold.
    #[default]
    FireIfAtLeastHalf,
}

/// How a frame's contribution depends on the firing weights, given the
/// event structure. `c_t` is the cumulative weight through frame `t`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PartKind {
    /// The frame's whole weight.
    Full,
    /// Closes event `k`: `k·θ − c_{t−1}`.
    Closing,
    /// Remainder opening event `k`: `c_t − (k−1)·θ`.
    Opening,
    /// The frame covers the entire event: `θ`.
    Spanning,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Part {
    pub frame: usize,
    pub weight: f64,
    pub kind: PartKind,
}

/// The split of a frame that straddles the threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Split {
    pub frame: usize,
    /// Portion that closes this event.
    pub closing: f64,
    /// Portion carried into the next event.
    pub carried: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FireEvent {
    /// Zero-based event index.
    pub index: usize,
    pub parts: Vec<Part>,
    pub split: Option<Split>,
    /// False for a trailing partial accumulation emitted by the tail policy.
    pub complete: bool,
}

impl FireEvent {
    pub fn mass(&self) -> f64 {
        self.parts.iter().map(|p| p.weight).sum()
    }

    pub fn first_frame(&self) -> usize {
        self.parts.first().map_or(0, |p| p.frame)
    }

    pub fn last_frame(&self) -> usize {
        self.parts.last().map_or(0, |p| p.frame)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Integration {
    pub events: Vec<FireEvent>,
    /// Accumulated mass not assigned to any emitted event.
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRepSequence {
    pub reps: Matrix,
    pub events: Vec<FireEvent>,
}

/// `α_t = σ(e_{t,d})` from the last column of the frame sequence.
pub fn firing_weights(frames: &Matrix) -> Result<FiringWeights> {
    if frames.cols() < 2 {
        return Err(Error::Shape { op: "firing_weights (need ≥ 2 columns)", lhs: frames.shape(), rhs: (0, 2) });
    }
    let d = frames.cols() - 1;
    Ok(FiringWeights::raw((0..frames.rows()).map(|t| sigmoid(frames.get(t, d))).collect()))
}

/// Rescales raw weights so they sum to `target_len`.
pub fn scale_weights(w: &FiringWeights, target_len: usize) -> Result<FiringWeights> {
    if w.mode != WeightMode::Raw {
        return Err(Error::WeightMode { expected: "raw", found: w.mode.name() });
    }
    if target_len == 0 {
        return Err(Error::Config("target length for scaled weights must be ≥ 1".into()));
    }
    let total = w.total();
    if !(total > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let factor = target_len as f64 / total;
    Ok(FiringWeights {
        alphas: w.alphas.iter().map(|a| a * factor).collect(),
        mode: WeightMode::Scaled { target_len },
    })
}

/// Left-to-right accumulation with threshold splitting.
pub fn fire_events(alphas: &[f64], threshold: f64, tail: TailPolicy) -> Integration {
    let mut events = Vec::new();
    let mut parts: Vec<Part> = Vec::new();
    let mut acc = 0.0;
    for (t, &alpha) in alphas.iter().enumerate() {
        let mut a = alpha;
        let mut fired_here = false;
        while acc + a >= threshold - FIRE_EPS {
            let closing = (threshold - acc).max(0.0);
            let kind = if fired_here { PartKind::Spanning } else { PartKind::Closing };
            parts.push(Part { frame: t, weight: closing, kind });
            a = (a - closing).max(0.0);
            let carried = if a <= FIRE_EPS { 0.0 } else { a };
            events.push(FireEvent {
                index: events.len(),
                parts: std::mem::take(&mut parts),
                split: Some(Split { frame: t, closing, carried }),
                complete: true,
            });
            fired_here = true;
            if carried == 0.0 {
                // Too small for a part, but kept in the accumulator so that
                // rounding slivers cannot add up to a missed event.
                acc = a;
                a = 0.0;
                break;
            }
            acc = 0.0;
        }
        if a > 0.0 {
            let kind = if fired_here { PartKind::Opening } else { PartKind::Full };
            parts.push(Part { frame: t, weight: a, kind });
            acc += a;
        }
    }
    let fire_tail = !parts.is_empty()
        && acc > FIRE_EPS
        && match tail {
            TailPolicy::AlwaysFire => true,
            TailPolicy::Drop => false,
            TailPolicy::FireIfAtLeastHalf => acc >= 0.5 * threshold,
        };
    let residual = if fire_tail {
        events.push(FireEvent { index: events.len(), parts, split: None, complete: false });
        0.0
    } else {
        acc
    };
    Integration { events, residual }
}

/// Runs integrate-and-fire over `content` (T×(d−1)) and returns the events
/// with their pooled content vectors, one row per event.
pub fn integrate_and_fire(
    content: &Matrix,
    w: &FiringWeights,
    threshold: f64,
    tail: TailPolicy,
) -> Result<(Integration, Matrix)> {
    if content.rows() != w.len() {
        return Err(Error::LengthMismatch { what: "content frames vs firing weights", left: content.rows(), right: w.len() });
    }
    let integ = fire_events(&w.alphas, threshold, tail);
    let mut pooled = Matrix::zeros(integ.events.len(), content.cols());
    for (k, ev) in integ.events.iter().enumerate() {
        let out = pooled.row_mut(k);
        for p in &ev.parts {
            for (o, x) in out.iter_mut().zip(content.row(p.frame)) {
                *o += p.weight * x;
            }
        }
    }
    Ok((integ, pooled))
}

/// Affine map from pooled content (d−1) to the embedding width.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Projection {
    pub fn register(params: &mut ParamSet, prefix: &str, rng: &mut impl rand::Rng, d_in: usize, d_out: usize) -> Self {
        let weight = params.add(format!("{prefix}.weight"), crate::diffmath::init_uniform(rng, d_in, d_out, d_in), true);
        let bias = params.add(format!("{prefix}.bias"), Matrix::zeros(1, d_out), true);
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.weight);
        let b = g.param(params, self.bias);
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }
}

/// `S[k] = pooled[k]·W + b`.
pub fn project(pooled: &Matrix, weight: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if bias.shape() != (1, weight.cols()) {
        return Err(Error::Shape { op: "project bias", lhs: weight.shape(), rhs: bias.shape() });
    }
    let mut s = pooled.matmul(weight)?;
    for r in 0..s.rows() {
        for (x, b) in s.row_mut(r).iter_mut().zip(bias.row(0)) {
            *x += b;
        }
    }
    Ok(s)
}

/// `|Σα − M|` over raw weights.
pub fn quantity_loss(w: &FiringWeights, target_len: usize) -> Result<f64> {
    if w.mode != WeightMode::Raw {
        return Err(Error::WeightMode { expected: "raw", found: w.mode.name() });
    }
    Ok((w.total() - target_len as f64).abs())
}

/// One event per line: index, frame span, per-frame weights, split.
pub fn dump_events(events: &[FireEvent]) -> String {
    let mut out = String::new();
    for ev in events {
        let weights: Vec<String> = ev.parts.iter().map(|p| format!("{}:{:.6}", p.frame, p.weight)).collect();
        let _ = write!(
            out,
            "event={} frames={}..={} mass={:.6} weights={}",
            ev.index,
            ev.first_frame(),
            ev.last_frame(),
            ev.mass(),
            weights.join(",")
        );
        if let Some(s) = ev.split {
            let _ = write!(out, " split={}:{:.6}/{:.6}", s.frame, s.closing, s.carried);
        }
        if !ev.complete {
            out.push_str(" tail");
        }
        out.push('\n');
    }
    out
}

/// Graph nodes produced by a differentiable CIF pass.
pub struct CifNodes {
    /// Raw firing weights, T×1.
    pub alpha: Var,
    /// Label-level representations, one row per event.
    pub reps: Var,
    pub events: Vec<FireEvent>,
}

/// Differentiable CIF over an encoder output node `frames` (T×d).
///
/// With `target_len`, weights are rescaled to sum to it (training); otherwise
/// raw weights are integrated under `tail`.
pub fn cif_graph(
    g: &mut Graph,
    params: &ParamSet,
    frames: Var,
    proj: &Projection,
    target_len: Option<usize>,
    threshold: f64,
    tail: TailPolicy,
) -> Result<CifNodes> {
    let (t_len, d) = g.value(frames).shape();
    if d < 2 {
        return Err(Error::Shape { op: "cif (need ≥ 2 columns)", lhs: (t_len, d), rhs: (0, 2) });
    }
    let content = g.slice_cols(frames, 0, d - 1)?;
    let logit = g.slice_cols(frames, d - 1, 1)?;
    let alpha = g.sigmoid(logit);
    let used = match target_len {
        Some(m) => {
            if m == 0 {
                return Err(Error::Config("target length for scaled weights must be ≥ 1".into()));
            }
            // α_t / Σα evaluated as a softmax over ln α, so that it stays
            // defined when every σ underflows.
            let log_alpha = g.log_sigmoid(logit);
            let peak = g.value(log_alpha).data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !peak.is_finite() {
                return Err(Error::DegenerateWeights);
            }
            let shift = g.input(Matrix::from_vec(t_len, 1, vec![peak; t_len])?);
            let shifted = g.sub(log_alpha, shift)?;
            let rel = g.exp(shifted);
            let total = g.sum(rel);
            let inv = g.recip(total);
            let factor = g.scale(inv, m as f64);
            g.scale_by(rel, factor)?
        }
        None => alpha,
    };
    let alphas: Vec<f64> = g.value(used).data().to_vec();
    let integ = fire_events(&alphas, threshold, if target_len.is_some() { TailPolicy::Drop } else { tail });
    let pooled = if integ.events.is_empty() {
        None
    } else {
        let weights = contribution_matrix(g, used, &integ.events, t_len, threshold)?;
        Some(g.matmul(weights, content)?)
    };
    let reps = match pooled {
        Some(p) => proj.forward(g, params, p)?,
        None => {
            let w = g.param(params, proj.weight);
            let dout = g.value(w).cols();
            g.input(Matrix::zeros(0, dout))
        }
    };
    Ok(CifNodes { alpha, reps, events: integ.events })
}

/// K×T matrix of contribution weights as affine functions of `alpha` (T×1).
fn contribution_matrix(g: &mut Graph, alpha: Var, events: &[FireEvent], t_len: usize, threshold: f64) -> Result<Var> {
    let k_len = events.len();
    let mut entries = Vec::new();
    let mut offset = Matrix::zeros(k_len, t_len);
    for (k, ev) in events.iter().enumerate() {
        let k1 = (k + 1) as f64;
        for p in &ev.parts {
            let o = k * t_len + p.frame;
            match p.kind {
                PartKind::Full => entries.push((o, p.frame, 1.0)),
                PartKind::Closing => {
                    offset.data_mut()[o] += k1 * threshold;
                    entries.extend((0..p.frame).map(|i| (o, i, -1.0)));
                }
                PartKind::Opening => {
                    offset.data_mut()[o] -= k as f64 * threshold;
                    entries.extend((0..=p.frame).map(|i| (o, i, 1.0)));
                }
                PartKind::Spanning => offset.data_mut()[o] += threshold,
            }
        }
    }
    g.weighted(alpha, k_len, t_len, entries, Some(offset))
}

/// `|Σα − M|` as a graph node over raw weights `alpha` (T×1).
pub fn quantity_loss_graph(g: &mut Graph, alpha: Var, target_len: usize) -> Result<Var> {
    let total = g.sum(alpha);
    let m = g.input(Matrix::scalar(target_len as f64));
    let diff = g.sub(total, m)?;
    Ok(g.abs(diff))
}
