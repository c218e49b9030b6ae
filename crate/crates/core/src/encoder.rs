//! Trainable sequence encoder: a 4× down-sampling front-end of two stride-2
//! temporal convolutions, then residual mixing layers (gated temporal
//! convolution and a pointwise MLP), then a projection whose last column is
//! the firing logit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{init_uniform, Graph, ParamId, ParamSet, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub d_in: usize,
    pub hidden: usize,
    /// Output width d: `d − 1` content columns plus the firing logit.
    pub d_out: usize,
    pub layers: usize,
    /// Width of the mixing convolutions (odd).
    pub kernel: usize,
    pub ff: usize,
    /// Initial bias of the firing-logit column.
    pub firing_bias: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { d_in: 16, hidden: 32, d_out: 25, layers: 2, kernel: 5, ff: 64, firing_bias: -1.0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.hidden == 0 || self.ff == 0 || self.d_out < 2 {
            return Err(Error::Config("encoder widths must be positive and d_out ≥ 2".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config("mixing kernel must be odd".into()));
        }
        Ok(())
    }
}

const FRONT_KERNEL: usize = 3;
pub const DOWNSAMPLE: usize = 4;

#[derive(Clone, Debug)]
struct Mixing {
    conv_w: ParamId,
    conv_b: ParamId,
    gate_w: ParamId,
    gate_b: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    front: [(ParamId, ParamId); 2],
    mixing: Vec<Mixing>,
    out_w: ParamId,
    out_b: ParamId,
}

/// Frames after the front-end: `ceil(T₀/4)`, at least 1.
pub fn output_len(t0: usize) -> usize {
    t0.max(DOWNSAMPLE).div_ceil(DOWNSAMPLE)
}

impl Encoder {
    /// Registers trainable tensors named `<prefix>.…`.
    pub fn register(params: &mut ParamSet, prefix: &str, cfg: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut dense = |params: &mut ParamSet, name: &str, fan_in: usize, out: usize, bias: f64| {
            let w = params.add(format!("{prefix}.{name}.w"), init_uniform(rng, fan_in, out, fan_in), true);
            let mut b = Matrix::zeros(1, out);
            if bias != 0.0 {
                b.set(0, out - 1, bias);
            }
            let b = params.add(format!("{prefix}.{name}.b"), b, true);
            (w, b)
        };
        let (h, k) = (cfg.hidden, cfg.kernel);
        let front = [
            dense(params, "front0", FRONT_KERNEL * cfg.d_in, h, 0.0),
            dense(params, "front1", FRONT_KERNEL * h, h, 0.0),
        ];
        let mut mixing = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let (conv_w, conv_b) = dense(params, &format!("mix{l}.conv"), k * h, h, 0.0);
            let (gate_w, gate_b) = dense(params, &format!("mix{l}.gate"), k * h, h, 0.0);
            let (ff_w1, ff_b1) = dense(params, &format!("mix{l}.ff1"), h, cfg.ff, 0.0);
            let (ff_w2, ff_b2) = dense(params, &format!("mix{l}.ff2"), cfg.ff, h, 0.0);
            mixing.push(Mixing { conv_w, conv_b, gate_w, gate_b, ff_w1, ff_b1, ff_w2, ff_b2 });
        }
        let (out_w, out_b) = dense(params, "out", h, cfg.d_out, cfg.firing_bias);
        Ok(Self { cfg, front, mixing, out_w, out_b })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// `E` (T×d) for features `x` (T₀×d_in), with `T = ceil(T₀/4)`.
    /// Inputs shorter than 4 frames are zero-padded to 4.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let (t0, d) = g.value(x).shape();
        if d != self.cfg.d_in {
            return Err(Error::Shape { op: "encoder input width", lhs: (t0, d), rhs: (t0, self.cfg.d_in) });
        }
        if t0 == 0 {
            return Err(Error::Empty("feature sequence"));
        }
        let x = if t0 < DOWNSAMPLE {
            let pad = g.input(Matrix::zeros(DOWNSAMPLE - t0, d));
            g.concat_rows(&[x, pad])?
        } else {
            x
        };
        let mut h = x;
        for &(w, b) in &self.front {
            let t = g.value(h).rows();
            let u = unfold(g, h, FRONT_KERNEL, 2, 1, t.div_ceil(2))?;
            let y = affine(g, params, u, w, b)?;
            h = g.silu(y)?;
        }
        let k = self.cfg.kernel;
        for m in &self.mixing {
            let t = g.value(h).rows();
            let u = unfold(g, h, k, 1, k / 2, t)?;
            let c = affine(g, params, u, m.conv_w, m.conv_b)?;
            let gate = affine(g, params, u, m.gate_w, m.gate_b)?;
            let gate = g.sigmoid(gate);
            let mixed = g.mul(c, gate)?;
            h = g.add(h, mixed)?;
            let f = affine(g, params, h, m.ff_w1, m.ff_b1)?;
            let f = g.silu(f)?;
            let f = affine(g, params, f, m.ff_w2, m.ff_b2)?;
            h = g.add(h, f)?;
        }
        affine(g, params, h, self.out_w, self.out_b)
    }

    pub fn encode(&self, params: &ParamSet, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let e = self.forward(&mut g, params, xv)?;
        Ok(g.value(e).clone())
    }
}

fn affine(g: &mut Graph, params: &ParamSet, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let wv = g.param(params, w);
    let bv = g.param(params, b);
    let y = g.matmul(x, wv)?;
    g.add(y, bv)
}

/// Row `t` of the result concatenates input rows `t·stride − pad + j` for
/// `j < k`; rows outside the input read as zeros.
pub fn unfold(g: &mut Graph, x: Var, k: usize, stride: usize, pad: usize, t_out: usize) -> Result<Var> {
    let (t_in, c) = g.value(x).shape();
    let mut entries = Vec::with_capacity(t_out * k * c);
    for t in 0..t_out {
        for j in 0..k {
            let Some(src) = (t * stride + j).checked_sub(pad).filter(|&s| s < t_in) else {
                continue;
            };
            for ch in 0..c {
                entries.push((t * k * c + j * c + ch, src * c + ch, 1.0));
            }
        }
    }
    g.weighted(x, t_out, k * c, entries, None)
}

/// Stacks `k` consecutive frames per row; the last group is zero-padded.
pub fn stack_frames(e: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 {
        return Err(Error::Config("stack size must be ≥ 1".into()));
    }
    let (t, d) = e.shape();
    let rows = t.div_ceil(k);
    let mut data = e.data().to_vec();
    data.resize(rows * k * d, 0.0);
    Matrix::from_vec(rows, k * d, data)
}

pub fn stack_frames_graph(g: &mut Graph, e: Var, k: usize) -> Result<Var> {
    if k == 0 {
        return Err(Error::Config("stack size must be ≥ 1".into()));
    }
    let t = g.value(e).rows();
    unfold(g, e, k, k, 0, t.div_ceil(k))
}

/// Inverse of [`stack_frames`] on the unpadded region.
pub fn unstack_frames(s: &Matrix, k: usize, t: usize) -> Result<Matrix> {
    let d = s.cols() / k.max(1);
    if t > s.rows() * k {
        return Err(Error::LengthMismatch { what: "unstack length", left: t, right: s.rows() * k });
    }
    Matrix::from_vec(t, d, s.data()[..t * d].to_vec())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffmath::{finite_diff_check, CheckConfig};

    fn encoder(cfg: EncoderConfig) -> (ParamSet, Encoder) {
        let mut p = ParamSet::new();
        let e = Encoder::register(&mut p, "enc", cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        (p, e)
    }

    #[test]
    fn length_law() {
        let (p, e) = encoder(EncoderConfig::default());
        for t0 in [1, 2, 3, 4, 5, 15, 16, 17, 33] {
            let out = e.encode(&p, &Matrix::filled(t0, 16, 0.3)).unwrap();
            assert_eq!(out.shape(), (output_len(t0), 25), "T0={t0}");
        }
        assert_eq!(output_len(16), 4);
        assert_eq!(output_len(3), 1);
        assert_eq!(output_len(17), 5);
    }

    #[test]
    fn zero_params_give_bias_only() {
        let (mut p, e) = encoder(EncoderConfig::default());
        let ids: Vec<_> = p.ids().collect();
        for id in ids {
            let is_out_bias = p.param(id).name() == "enc.out.b";
            if !is_out_bias {
                p.get_mut(id).scale_assign(0.0);
            }
        }
        let out = e.encode(&p, &Matrix::zeros(12, 16)).unwrap();
        for r in 0..out.rows() {
            assert!(out.row(r)[..24].iter().all(|&x| x == 0.0));
            assert_eq!(out.get(r, 24), -1.0);
        }
    }

    #[test]
    fn stacking_layout() {
        let e = Matrix::from_vec(13, 2, (0..26).map(f64::from).collect()).unwrap();
        let s = stack_frames(&e, 8).unwrap();
        assert_eq!(s.shape(), (2, 16));
        assert_eq!(s.row(0), &e.data()[..16]);
        assert_eq!(&s.row(1)[..10], &e.data()[16..26]);
        assert!(s.row(1)[10..].iter().all(|&x| x == 0.0));
        assert_eq!(stack_frames(&e, 1).unwrap(), e);
        assert_eq!(unstack_frames(&s, 8, 13).unwrap(), e);
        assert_eq!(stack_frames(&Matrix::zeros(16, 3), 8).unwrap().shape(), (2, 24));

        let mut g = Graph::new();
        let v = g.input(e.clone());
        let sg = stack_frames_graph(&mut g, v, 8).unwrap();
        assert_eq!(g.value(sg), &s);
    }

    #[test]
    fn mean_output_gradient_matches_finite_differences() {
        let cfg = EncoderConfig { d_in: 3, hidden: 4, d_out: 3, layers: 1, kernel: 3, ff: 5, firing_bias: -1.0 };
        let (p, e) = encoder(cfg);
        let x = Matrix::from_vec(9, 3, (0..27).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect()).unwrap();
        let rep = finite_diff_check(&p, CheckConfig::default(), |g, set| {
            let xv = g.input(x.clone());
            let out = e.forward(g, set, xv)?;
            let s = g.sum(out);
            let n = g.value(out).len() as f64;
            Ok(g.scale(s, 1.0 / n))
        })
        .unwrap();
        assert!(rep.max_rel_err() < 1e-4, "{rep:#?}");
        assert_eq!(rep.params.len(), p.len());
    }
}
