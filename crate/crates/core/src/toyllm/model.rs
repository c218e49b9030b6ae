use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{init_uniform, softmax_into, Graph, ParamId, ParamSet, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub d_ff: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { vocab: 40, d_model: 32, layers: 2, heads: 2, context: 128, d_ff: 128 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.d_model == 0 || self.layers == 0 || self.context == 0 || self.d_ff == 0 {
            return Err(Error::Config("language model dimensions must be positive".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Where each language-model tensor lives inside a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct LmLayout {
    cfg: LmConfig,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    lnf: (ParamId, ParamId),
    head_w: ParamId,
    head_b: ParamId,
}

/// Tensor names and shapes in declaration order.
pub fn tensor_specs(cfg: &LmConfig) -> Vec<(String, usize, usize)> {
    let (d, f) = (cfg.d_model, cfg.d_ff);
    let mut v = vec![("lm.tok".to_string(), cfg.vocab, d), ("lm.pos".to_string(), cfg.context, d)];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("lm.b{l}.{s}");
        v.extend([
            (p("ln1.g"), 1, d),
            (p("ln1.b"), 1, d),
            (p("wq"), d, d),
            (p("wk"), d, d),
            (p("wv"), d, d),
            (p("wo"), d, d),
            (p("bo"), 1, d),
            (p("ln2.g"), 1, d),
            (p("ln2.b"), 1, d),
            (p("w1"), d, f),
            (p("b1"), 1, f),
            (p("w2"), f, d),
            (p("b2"), 1, d),
        ]);
    }
    v.extend([
        ("lm.lnf.g".to_string(), 1, d),
        ("lm.lnf.b".to_string(), 1, d),
        ("lm.head.w".to_string(), d, cfg.vocab),
        ("lm.head.b".to_string(), 1, cfg.vocab),
    ]);
    v
}

impl LmLayout {
    /// Registers freshly initialised, trainable LM tensors.
    pub fn register(params: &mut ParamSet, cfg: LmConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        for (name, r, c) in tensor_specs(&cfg) {
            let value = if name.ends_with(".g") {
                Matrix::filled(r, c, 1.0)
            } else if r == 1 {
                Matrix::zeros(r, c)
            } else if name == "lm.tok" || name == "lm.pos" {
                // Lookup tables see a one-hot input.
                init_uniform(rng, r, c, 1)
            } else {
                init_uniform(rng, r, c, r)
            };
            params.add(name, value, true);
        }
        Self::locate(params, cfg)
    }

    /// Finds the LM tensors in `params` by name and checks their shapes.
    pub fn locate(params: &ParamSet, cfg: LmConfig) -> Result<Self> {
        cfg.validate()?;
        let find = |name: &str, r: usize, c: usize| -> Result<ParamId> {
            let id = params.id(name).ok_or_else(|| Error::Integrity(format!("missing LM tensor {name}")))?;
            if params.get(id).shape() != (r, c) {
                return Err(Error::Integrity(format!("LM tensor {name} has shape {:?}, expected ({r}, {c})", params.get(id).shape())));
            }
            Ok(id)
        };
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = |s: &str| format!("lm.b{l}.{s}");
                Ok(Block {
                    ln1: (find(&p("ln1.g"), 1, d)?, find(&p("ln1.b"), 1, d)?),
                    wq: find(&p("wq"), d, d)?,
                    wk: find(&p("wk"), d, d)?,
                    wv: find(&p("wv"), d, d)?,
                    wo: find(&p("wo"), d, d)?,
                    bo: find(&p("bo"), 1, d)?,
                    ln2: (find(&p("ln2.g"), 1, d)?, find(&p("ln2.b"), 1, d)?),
                    w1: find(&p("w1"), d, f)?,
                    b1: find(&p("b1"), 1, f)?,
                    w2: find(&p("w2"), f, d)?,
                    b2: find(&p("b2"), 1, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            tok: find("lm.tok", cfg.vocab, d)?,
            pos: find("lm.pos", cfg.context, d)?,
            blocks,
            lnf: (find("lm.lnf.g", 1, d)?, find("lm.lnf.b", 1, d)?),
            head_w: find("lm.head.w", d, cfg.vocab)?,
            head_b: find("lm.head.b", 1, cfg.vocab)?,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn token_table<'a>(&self, params: &'a ParamSet) -> &'a Matrix {
        params.get(self.tok)
    }

    /// Token-table rows for `tokens` as a graph node.
    pub fn embed_graph(&self, g: &mut Graph, params: &ParamSet, tokens: &[usize]) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::UnknownToken(bad));
        }
        let table = g.param(params, self.tok);
        g.gather_rows(table, tokens)
    }

    /// Causal forward over a batch of embedded sequences (each `N_i × d`);
    /// returns one `N_i × V` logit matrix per sequence.
    ///
    /// Learned absolute positions are added here, so embeddings entering the
    /// model carry no positional information. Attention never crosses
    /// sequence boundaries.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, seqs: &[Var]) -> Result<Vec<Var>> {
        let cfg = &self.cfg;
        let mut lens = Vec::with_capacity(seqs.len());
        for &s in seqs {
            let (n, d) = g.value(s).shape();
            if d != cfg.d_model {
                return Err(Error::Shape { op: "lm_forward input width", lhs: (n, d), rhs: (n, cfg.d_model) });
            }
            if n > cfg.context {
                return Err(Error::ContextOverflow { len: n, max: cfg.context });
            }
            if n == 0 {
                return Err(Error::EmptyPrompt);
            }
            lens.push(n);
        }
        if seqs.is_empty() {
            return Ok(Vec::new());
        }
        let x = if seqs.len() == 1 { seqs[0] } else { g.concat_rows(seqs)? };
        let pos_idx: Vec<usize> = lens.iter().flat_map(|&n| 0..n).collect();
        let pos_table = g.param(params, self.pos);
        let pos = g.gather_rows(pos_table, &pos_idx)?;
        let mut h = g.add(x, pos)?;

        let dh = cfg.d_model / cfg.heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for b in &self.blocks {
            let a = self.norm(g, params, h, b.ln1)?;
            let q = self.linear(g, params, a, b.wq, None)?;
            let q = g.scale(q, inv_sqrt);
            let k = self.linear(g, params, a, b.wk, None)?;
            let v = self.linear(g, params, a, b.wv, None)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            for hd in 0..cfg.heads {
                let (qh, kh, vh) = if cfg.heads == 1 {
                    (q, k, v)
                } else {
                    (g.slice_cols(q, hd * dh, dh)?, g.slice_cols(k, hd * dh, dh)?, g.slice_cols(v, hd * dh, dh)?)
                };
                let mut outs = Vec::with_capacity(lens.len());
                let mut off = 0;
                for &n in &lens {
                    let (qs, ks, vs) = if lens.len() == 1 {
                        (qh, kh, vh)
                    } else {
                        (g.slice_rows(qh, off, n)?, g.slice_rows(kh, off, n)?, g.slice_rows(vh, off, n)?)
                    };
                    let scores = g.matmul_t(qs, ks)?;
                    let p = g.softmax(scores, true)?;
                    outs.push(g.matmul(p, vs)?);
                    off += n;
                }
                heads.push(if outs.len() == 1 { outs[0] } else { g.concat_rows(&outs)? });
            }
            let att = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let att = self.linear(g, params, att, b.wo, Some(b.bo))?;
            h = g.add(h, att)?;
            let a = self.norm(g, params, h, b.ln2)?;
            let f = self.linear(g, params, a, b.w1, Some(b.b1))?;
            let f = g.silu(f)?;
            let f = self.linear(g, params, f, b.w2, Some(b.b2))?;
            h = g.add(h, f)?;
        }
        let hf = self.norm(g, params, h, self.lnf)?;
        let logits = self.linear(g, params, hf, self.head_w, Some(self.head_b))?;
        if lens.len() == 1 {
            return Ok(vec![logits]);
        }
        let mut out = Vec::with_capacity(lens.len());
        let mut off = 0;
        for &n in &lens {
            out.push(g.slice_rows(logits, off, n)?);
            off += n;
        }
        Ok(out)
    }

    fn norm(&self, g: &mut Graph, params: &ParamSet, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var> {
        let n = g.layer_norm(x, LN_EPS);
        let gv = g.param(params, gain);
        let bv = g.param(params, bias);
        let y = g.mul(n, gv)?;
        g.add(y, bv)
    }

    fn linear(&self, g: &mut Graph, params: &ParamSet, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let wv = g.param(params, w);
        let y = g.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = g.param(params, b);
                g.add(y, bv)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    PromptText,
    LlmInput,
    Prefix,
    Postfix,
    Speech,
}

/// Rows in the LM's embedding space, tagged by where they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedSequence {
    pub rows: Matrix,
    /// Consecutive `(role, row count)` segments covering `rows`.
    pub segments: Vec<(Role, usize)>,
}

impl EmbeddedSequence {
    pub fn new(rows: Matrix, role: Role) -> Self {
        let n = rows.rows();
        Self { rows, segments: vec![(role, n)] }
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    /// Row-wise concatenation keeping every part's segments.
    pub fn concat(parts: &[&EmbeddedSequence]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.rows.cols());
        let mut data = Vec::new();
        let mut segments = Vec::new();
        for p in parts {
            if p.rows.cols() != cols {
                return Err(Error::Shape { op: "embedded concat", lhs: (0, cols), rhs: p.rows.shape() });
            }
            data.extend_from_slice(p.rows.data());
            segments.extend(p.segments.iter().copied().filter(|s| s.1 > 0));
        }
        let n = data.len() / cols.max(1);
        Ok(Self { rows: Matrix::from_vec(n, cols, data)?, segments })
    }
}

/// Softmax of one logit row.
pub fn next_token_dist(logits: &[f64]) -> Result<Vec<f64>> {
    if let Some(&bad) = logits.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite { value: bad, context: "in logits".into() });
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}
