use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::diffmath::log_sum_exp;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    pub repetition_penalty: f64,
    /// Maximum generated tokens, the end token included.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam: 5, repetition_penalty: 1.5, max_len: 16 }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        Self { beam: 1, ..Self::default() }
    }
}

/// For each distinct token already in `history`: positive logits are divided
/// by `rho`, the rest multiplied by it.
pub fn apply_repetition_penalty(logits: &mut [f64], history: &[usize], rho: f64) {
    if rho == 1.0 {
        return;
    }
    let mut seen = vec![false; logits.len()];
    for &t in history {
        if t < logits.len() && !seen[t] {
            seen[t] = true;
            let l = &mut logits[t];
            *l = if *l > 0.0 { *l / rho } else { *l * rho };
        }
    }
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
}

#[derive(Clone, Debug)]
pub struct Finished {
    /// Generated tokens without the end token.
    pub tokens: Vec<usize>,
    /// Length-normalised log-probability (end token counted in the length).
    pub score: f64,
    pub terminated: bool,
}

fn better(a: &Finished, b: &Finished) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search. `next_logits` maps each live hypothesis (generated tokens so
/// far) to the next-token logits.
///
/// Candidates are ranked by cumulative log-probability, ties broken by
/// parent rank then token id. A candidate ending in `eos` is set aside as
/// finished and the best `beam` finished hypotheses are kept. The search
/// stops after `max_len` tokens, or once that pool is full and the best live
/// hypothesis, normalised by its next length, cannot beat the worst kept
/// one. The best finished hypothesis by length-normalised score wins, ties
/// broken by token sequence.
pub fn beam_search<F>(eos: usize, cfg: &DecodeConfig, mut next_logits: F) -> Result<Finished>
where
    F: FnMut(&[Vec<usize>]) -> Result<Vec<Vec<f64>>>,
{
    if cfg.beam == 0 || cfg.max_len == 0 {
        return Err(Error::Config("beam width and max length must be positive".into()));
    }
    let mut live = vec![Hyp { tokens: Vec::new(), logp: 0.0 }];
    let mut finished: Vec<Finished> = Vec::new();
    for step in 0..cfg.max_len {
        let histories: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let all = next_logits(&histories)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (bi, (h, mut logits)) in live.iter().zip(all).enumerate() {
            if let Some(&bad) = logits.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite { value: bad, context: "in decoder logits".into() });
            }
            apply_repetition_penalty(&mut logits, &h.tokens, cfg.repetition_penalty);
            let lse = log_sum_exp(&logits);
            cands.extend(logits.iter().enumerate().map(|(t, &l)| (h.logp + l - lse, bi, t)));
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(cfg.beam);
        for (logp, bi, t) in cands {
            if next.len() == cfg.beam {
                break;
            }
            let mut tokens = live[bi].tokens.clone();
            if t == eos {
                finished.push(Finished { score: logp / (step + 1) as f64, tokens, terminated: true });
            } else {
                tokens.push(t);
                next.push(Hyp { tokens, logp });
            }
        }
        live = next;
        finished.sort_by(better);
        finished.truncate(cfg.beam);
        if live.is_empty() {
            break;
        }
        if finished.len() == cfg.beam {
            let worst = finished[cfg.beam - 1].score;
            let best_live = live.iter().map(|h| h.logp).fold(f64::NEG_INFINITY, f64::max) / (step + 2) as f64;
            if best_live <= worst {
                break;
            }
        }
    }
    if finished.is_empty() {
        finished.extend(live.into_iter().map(|h| Finished {
            score: h.logp / h.tokens.len().max(1) as f64,
            tokens: h.tokens,
            terminated: false,
        }));
    }
    finished.sort_by(better);
    Ok(finished.swap_remove(0))
}
