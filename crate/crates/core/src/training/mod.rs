//! Objectives and the training loop. ASR-data training combines
//! cross-entropy with an embedding MSE and the quantity loss under scaled
//! firing weights; few-shot fine-tuning drops the MSE and integrates raw
//! weights. Only the prompt-producing parameters are updated.

mod losses;
mod system;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cif::{quantity_loss_graph, TailPolicy, DEFAULT_THRESHOLD};
use crate::diffmath::{backprop, Adam, AdamConfig, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::metrics::Scores;
use crate::seeds;
use crate::synthdata::Record;
use crate::toyllm::{DecodeConfig, FrozenLM, PromptTemplate, EOS};

pub use losses::{ce_loss, ce_loss_graph, mse_loss, mse_loss_graph, LossBreakdown};
pub(crate) use losses::ce_picks_graph;
pub use system::{Integrate, PromptSystem, SpeechPrompt, Wav2Prompt};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    #[default]
    AsrTrain,
    FewShotFinetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the embedding MSE (ASR-data training only).
    pub gamma: f64,
    /// Weight of the quantity loss.
    pub mu: f64,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub regime: Regime,
    /// Learning rate decays linearly to this fraction of the base rate.
    pub lr_floor: f64,
    /// Stops after this many updates when set.
    pub max_steps: Option<usize>,
    pub threshold: f64,
    pub tail: TailPolicy,
    /// Validation records decoded per epoch.
    pub val_samples: usize,
    pub val_decode: DecodeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 20.0,
            mu: 0.05,
            optimizer: AdamConfig { lr: 5e-3, ..AdamConfig::default() },
            epochs: 10,
            batch_size: 16,
            seed: 0,
            regime: Regime::AsrTrain,
            lr_floor: 0.1,
            max_steps: None,
            threshold: DEFAULT_THRESHOLD,
            tail: TailPolicy::default(),
            val_samples: 200,
            val_decode: DecodeConfig::greedy(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.mu >= 0.0) {
            return Err(Error::Config("gamma and mu must be non-negative".into()));
        }
        if self.batch_size == 0 || !(self.threshold > 0.0) || !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("batch size, threshold and learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config("lr_floor must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// γ as applied under the configured regime.
    pub fn effective_gamma(&self) -> f64 {
        match self.regime {
            Regime::AsrTrain => self.gamma,
            Regime::FewShotFinetune => 0.0,
        }
    }
}

/// A differentiable batch loss with its components.
pub struct Objective {
    pub graph: Graph,
    pub loss: Var,
    pub parts: LossBreakdown,
    /// Σ |events − M| over the batch, for CIF systems.
    pub firing_drift: Option<f64>,
    /// Hash of the firing-event structure; the loss is smooth while it is unchanged.
    pub structure: u64,
}

/// Loss for `batch` under `regime`.
///
/// Each record is rendered as `[sos] prefix ‖ payload ‖ postfix ‖ response`;
/// cross-entropy covers the response and the end token, averaged over all
/// such tokens in the batch. MSE and the quantity loss are averaged over
/// utterances. Fixed-rate systems use cross-entropy only.
pub fn objective(
    system: &PromptSystem,
    params: &ParamSet,
    lm: &FrozenLM,
    batch: &[&Record],
    cfg: &TrainConfig,
    regime: Regime,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let gamma = if regime == Regime::AsrTrain && system.uses_cif() { cfg.gamma } else { 0.0 };
    let mu = if system.uses_cif() { cfg.mu } else { 0.0 };
    let mut g = Graph::new();
    let mut seqs = Vec::with_capacity(batch.len());
    let mut starts = Vec::with_capacity(batch.len());
    let (mut mse_terms, mut qua_terms) = (Vec::new(), Vec::new());
    let mut drift = 0.0;
    let mut structure = DefaultHasher::new();
    for rec in batch {
        let template = PromptTemplate::from_id(rec.template)?;
        let m = rec.input.len();
        let x = g.input(rec.frames.clone());
        let how = match regime {
            Regime::AsrTrain => Integrate::Scaled(m),
            Regime::FewShotFinetune => Integrate::Raw(cfg.tail),
        };
        let sp = system.speech_prompt(&mut g, params, x, how, cfg.threshold)?;
        if let Some(alpha) = sp.alpha {
            drift += (sp.events.len() as f64 - m as f64).abs();
            sp.events.len().hash(&mut structure);
            for ev in &sp.events {
                for part in &ev.parts {
                    (part.frame, part.kind as u8).hash(&mut structure);
                }
            }
            if regime == Regime::AsrTrain {
                let p = lm.embed_graph(&mut g, &rec.input)?;
                mse_terms.push(mse_loss_graph(&mut g, sp.payload, p)?);
            }
            qua_terms.push(quantity_loss_graph(&mut g, alpha, m)?);
        }
        let lead = lm.embed_graph(&mut g, &template.lead())?;
        let post = lm.embed_graph(&mut g, &template.postfix)?;
        let resp = lm.embed_graph(&mut g, &rec.target)?;
        let payload_len = g.value(sp.payload).rows();
        starts.push(g.value(lead).rows() + payload_len + g.value(post).rows() - 1);
        seqs.push(g.concat_rows(&[lead, sp.payload, post, resp])?);
    }
    let logits = lm.forward_graph(&mut g, &seqs)?;
    let mut picks = Vec::new();
    let mut base = 0;
    for ((rec, &l), start) in batch.iter().zip(&logits).zip(starts) {
        for (j, &t) in rec.target.iter().chain(std::iter::once(&EOS)).enumerate() {
            picks.push((base + start + j, t));
        }
        base += g.value(l).rows();
    }
    let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits)? };
    let ce = ce_picks_graph(&mut g, all, &picks, picks.len())?;
    let n = batch.len() as f64;
    let mean = |g: &mut Graph, terms: &[Var]| -> Result<Option<Var>> {
        if terms.is_empty() {
            return Ok(None);
        }
        let joined = if terms.len() == 1 { terms[0] } else { g.concat_rows(terms)? };
        let s = g.sum(joined);
        Ok(Some(g.scale(s, 1.0 / n)))
    };
    let mse = mean(&mut g, &mse_terms)?;
    let qua = mean(&mut g, &qua_terms)?;
    let val = |g: &Graph, v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let parts = LossBreakdown::compose(g.value(ce).item(), val(&g, mse), val(&g, qua), gamma, mu);
    let mut loss = ce;
    if let (Some(m), true) = (mse, gamma > 0.0) {
        let w = g.scale(m, gamma);
        loss = g.add(loss, w)?;
    }
    if let (Some(q), true) = (qua, mu > 0.0) {
        let w = g.scale(q, mu);
        loss = g.add(loss, w)?;
    }
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite { value: g.value(loss).item(), context: format!("in batch loss ({parts:?})") });
    }
    Ok(Objective { graph: g, loss, parts, firing_drift: system.uses_cif().then_some(drift), structure: structure.finish() })
}

/// ASR-data objective: `CE + γ·MSE + μ·L_qua` with scaled weights.
pub fn train_objective(system: &PromptSystem, params: &ParamSet, lm: &FrozenLM, batch: &[&Record], cfg: &TrainConfig) -> Result<Objective> {
    objective(system, params, lm, batch, cfg, Regime::AsrTrain)
}

/// Fine-tuning objective: `CE + μ·L_qua` with raw weights.
pub fn finetune_objective(system: &PromptSystem, params: &ParamSet, lm: &FrozenLM, batch: &[&Record], cfg: &TrainConfig) -> Result<Objective> {
    objective(system, params, lm, batch, cfg, Regime::FewShotFinetune)
}

/// One line of the metrics history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub steps: usize,
    /// Batch-mean loss components.
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    /// Mean |events − M| per utterance, for CIF systems.
    pub firing_drift: Option<f64>,
    /// Validation token accuracy in percent.
    pub val_token_accuracy: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters of the best validation epoch, or the last when there is no
    /// validation data.
    pub params: ParamSet,
    pub optimizer: Adam,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Generic epoch loop with seeded shuffling, linear learning-rate decay,
/// clipping inside the optimizer and best-epoch selection.
pub(crate) fn fit(
    mut params: ParamSet,
    resume: Option<Adam>,
    cfg: &TrainConfig,
    n: usize,
    mut step: impl FnMut(&ParamSet, &[usize]) -> Result<Objective>,
    mut validate: impl FnMut(&ParamSet) -> Result<Option<f64>>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if n == 0 && cfg.epochs > 0 {
        return Err(Error::Empty("training set"));
    }
    let resuming = resume.is_some();
    let mut opt = match resume {
        Some(mut o) => {
            o.cfg = cfg.optimizer;
            o
        }
        None => Adam::new(cfg.optimizer, &params),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..n).collect();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let mut total_steps = per_epoch * cfg.epochs;
    if let Some(cap) = cfg.max_steps {
        total_steps = total_steps.min(cap);
    }
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    // A resumed run must beat its starting point to replace it.
    if resuming && cfg.epochs > 0 {
        if let Some(v) = validate(&params)? {
            best = Some((v, 0, params.clone()));
        }
    }
    let mut done = 0usize;
    for epoch in 1..=cfg.epochs {
        if done >= total_steps {
            break;
        }
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let (mut norm_sum, mut drift, mut steps, mut seen) = (0.0, None::<f64>, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if done >= total_steps {
                break;
            }
            let progress = done as f64 / total_steps.max(1) as f64;
            opt.cfg.lr = cfg.optimizer.lr * (1.0 - (1.0 - cfg.lr_floor) * progress);
            let obj = step(&params, chunk)?;
            let mut grads = backprop(&obj.graph, obj.loss, &params).map_err(|e| match e {
                Error::NonFinite { value, .. } => Error::NonFinite { value, context: format!("at epoch {epoch} step {}", done + 1) },
                e => e,
            })?;
            norm_sum += opt.update(&mut params, &mut grads);
            sum.add_scaled(&obj.parts, 1.0);
            if let Some(d) = obj.firing_drift {
                *drift.get_or_insert(0.0) += d;
            }
            seen += chunk.len();
            steps += 1;
            done += 1;
        }
        let k = steps.max(1) as f64;
        let mut loss = LossBreakdown::default();
        loss.add_scaled(&sum, 1.0 / k);
        let val = validate(&params)?;
        let rec = EpochRecord {
            epoch,
            split: "train".into(),
            steps,
            loss,
            grad_norm: norm_sum / k,
            firing_drift: drift.map(|d| d / seen.max(1) as f64),
            val_token_accuracy: val,
        };
        on_epoch(&rec);
        history.push(rec);
        let metric = val.unwrap_or(f64::NEG_INFINITY);
        if val.is_none() || best.as_ref().is_none_or(|b| metric > b.0) {
            best = Some((metric, epoch, params.clone()));
        }
    }
    let (params, best_epoch) = match best {
        Some((_, e, p)) if history.iter().any(|h| h.val_token_accuracy.is_some()) => (p, e),
        _ => (params, history.len()),
    };
    Ok(TrainOutcome { params, optimizer: opt, history, best_epoch })
}

/// Token accuracy (percent) of raw-weight inference on up to `limit` records.
pub fn evaluate_prompt_system(
    system: &PromptSystem,
    params: &ParamSet,
    lm: &FrozenLM,
    records: &[Record],
    decode: &DecodeConfig,
    threshold: f64,
    tail: TailPolicy,
) -> Result<(Scores, Vec<Vec<usize>>)> {
    let mut outputs = Vec::with_capacity(records.len());
    for rec in records {
        let template = PromptTemplate::from_id(rec.template)?;
        outputs.push(system.infer(params, lm, &rec.frames, &template, decode, threshold, tail)?);
    }
    let scores = Scores::from_pairs(outputs.iter().zip(records).map(|(h, r)| (h.as_slice(), r.target.as_slice())));
    Ok((scores, outputs))
}

/// Trains a prompt system on `train` under `cfg.regime`, verifying the LM
/// checksum before and after.
pub fn run_training(
    lm: &FrozenLM,
    system: &PromptSystem,
    params: ParamSet,
    train: &[Record],
    val: &[Record],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    run_training_from(lm, system, params, None, train, val, cfg, on_epoch)
}

/// [`run_training`] continuing from saved optimizer moments; the learning
/// rate and the other settings come from `cfg`.
#[allow(clippy::too_many_arguments)]
pub fn run_training_from(
    lm: &FrozenLM,
    system: &PromptSystem,
    params: ParamSet,
    resume: Option<Adam>,
    train: &[Record],
    val: &[Record],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    lm.verify()?;
    let val = &val[..val.len().min(cfg.val_samples)];
    let out = fit(
        params,
        resume,
        cfg,
        train.len(),
        |p, idx| {
            let batch: Vec<&Record> = idx.iter().map(|&i| &train[i]).collect();
            objective(system, p, lm, &batch, cfg, cfg.regime)
        },
        |p| {
            if val.is_empty() {
                return Ok(None);
            }
            let (s, _) = evaluate_prompt_system(system, p, lm, val, &cfg.val_decode, cfg.threshold, cfg.tail)?;
            Ok(Some(s.token_accuracy))
        },
        on_epoch,
    )?;
    lm.verify()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn quadratic(p: &ParamSet) -> Result<Objective> {
        let mut g = Graph::new();
        let id = p.id("w").expect("registered");
        let w = g.param(p, id);
        let sq = g.mul(w, w)?;
        let loss = g.sum(sq);
        let parts = LossBreakdown::compose(g.value(loss).item(), 0.0, 0.0, 0.0, 0.0);
        Ok(Objective { graph: g, loss, parts, firing_drift: None, structure: 0 })
    }

    fn setup() -> (ParamSet, TrainConfig) {
        let mut p = ParamSet::new();
        p.add("w", Matrix::column(&[1.0, -2.0]), true);
        (p, TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::default() })
    }

    #[test]
    fn resumed_run_keeps_start_unless_validation_improves() {
        let (p, cfg) = setup();
        let opt = Adam::new(cfg.optimizer, &p);
        // Validation gets worse with every epoch.
        let mut calls = 0.0;
        let out = fit(p.clone(), Some(opt.clone()), &cfg, 8, |p, _| quadratic(p), |_| {
            calls += 1.0;
            Ok(Some(100.0 - calls))
        }, &mut |_| {})
        .unwrap();
        assert_eq!(out.best_epoch, 0);
        assert!(out.params.same_values(&p));
        assert_eq!(out.history.len(), 3);

        let mut calls = 0.0;
        let out = fit(p.clone(), Some(opt), &cfg, 8, |p, _| quadratic(p), |_| {
            calls += 1.0;
            Ok(Some(calls))
        }, &mut |_| {})
        .unwrap();
        assert_eq!(out.best_epoch, 3);
        assert!(!out.params.same_values(&p));
    }

    #[test]
    fn fresh_run_has_no_baseline() {
        let (p, cfg) = setup();
        let out = fit(p.clone(), None, &cfg, 8, |p, _| quadratic(p), |_| Ok(Some(1.0)), &mut |_| {}).unwrap();
        assert_eq!(out.best_epoch, 1);
        assert!(!out.params.same_values(&p));
    }
}
