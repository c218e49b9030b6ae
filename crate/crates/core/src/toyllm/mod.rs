//! The frozen toy language model: character vocabulary, prompt templates, a
//! small pre-norm causal transformer, beam-search generation and the
//! pretraining run that produces the fixture.

mod fixture;
mod generate;
mod model;
mod vocab;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffmath::{backprop, hex, Adam, AdamConfig, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub use fixture::{FixtureMeta, FIXTURE_MAGIC, FIXTURE_VERSION};
pub use generate::{apply_repetition_penalty, beam_search, DecodeConfig, Finished};
pub use model::{next_token_dist, tensor_specs, EmbeddedSequence, LmConfig, LmLayout, Role};
pub use vocab::*;

/// A text-only instruction line: rendered prompt and expected response
/// (without the end token).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextExample {
    pub task: Task,
    pub payload: Vec<usize>,
    pub response: Vec<usize>,
}

impl TextExample {
    pub fn prompt(&self) -> Vec<usize> {
        self.task.template().render(&self.payload)
    }
}

/// Immutable language model with its parameter checksum.
#[derive(Clone, Debug)]
pub struct FrozenLM {
    params: ParamSet,
    layout: LmLayout,
    checksum: String,
}

impl FrozenLM {
    /// Freezes `params` (every tensor becomes non-trainable) and records the checksum.
    pub fn new(params: ParamSet, cfg: LmConfig) -> Result<Self> {
        let params = params.into_frozen();
        let layout = LmLayout::locate(&params, cfg)?;
        let checksum = params.checksum();
        Ok(Self { params, layout, checksum })
    }

    pub fn config(&self) -> &LmConfig {
        self.layout.config()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn layout(&self) -> &LmLayout {
        &self.layout
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn d_model(&self) -> usize {
        self.config().d_model
    }

    /// Recomputes the parameter checksum and compares it with the recorded one.
    pub fn verify(&self) -> Result<()> {
        let now = self.params.checksum();
        if now != self.checksum {
            return Err(Error::Integrity(format!("frozen LM checksum changed: {} → {now}", self.checksum)));
        }
        Ok(())
    }

    pub fn token_table(&self) -> &Matrix {
        self.layout.token_table(&self.params)
    }

    /// Token-table rows; no positional information.
    pub fn embed(&self, tokens: &[usize]) -> Result<EmbeddedSequence> {
        let table = self.token_table();
        let mut rows = Matrix::zeros(tokens.len(), table.cols());
        for (r, &t) in tokens.iter().enumerate() {
            if t >= table.rows() {
                return Err(Error::UnknownToken(t));
            }
            rows.row_mut(r).copy_from_slice(table.row(t));
        }
        Ok(EmbeddedSequence::new(rows, Role::PromptText))
    }

    pub fn embed_graph(&self, g: &mut Graph, tokens: &[usize]) -> Result<Var> {
        self.layout.embed_graph(g, &self.params, tokens)
    }

    pub fn forward_graph(&self, g: &mut Graph, seqs: &[Var]) -> Result<Vec<Var>> {
        self.layout.forward(g, &self.params, seqs)
    }

    /// Logits for every position of `seq`.
    pub fn lm_forward(&self, seq: &EmbeddedSequence) -> Result<Matrix> {
        let mut g = Graph::new();
        let x = g.input(seq.rows.clone());
        let out = self.forward_graph(&mut g, &[x])?;
        Ok(g.value(out[0]).clone())
    }

    /// `[sos] prefix ‖ payload ‖ postfix` for an embedded payload.
    pub fn prompt_with_payload(&self, template: &PromptTemplate, payload: &EmbeddedSequence) -> Result<EmbeddedSequence> {
        let mut lead = self.embed(&template.lead())?;
        lead.segments = vec![(Role::Prefix, lead.len())];
        let mut post = self.embed(&template.postfix)?;
        post.segments = vec![(Role::Postfix, post.len())];
        EmbeddedSequence::concat(&[&lead, payload, &post])
    }

    /// Decodes a response after `prompt`; the end token is not returned.
    pub fn generate(&self, prompt: &EmbeddedSequence, cfg: &DecodeConfig) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let room = self.config().context.saturating_sub(prompt.len());
        if room == 0 {
            return Err(Error::ContextOverflow { len: prompt.len() + 1, max: self.config().context });
        }
        let cfg = DecodeConfig { max_len: cfg.max_len.min(room), ..*cfg };
        let out = beam_search(EOS, &cfg, |hyps| {
            let mut g = Graph::new();
            let p = g.input(prompt.rows.clone());
            let seqs = hyps
                .iter()
                .map(|h| {
                    if h.is_empty() {
                        Ok(p)
                    } else {
                        let e = self.embed_graph(&mut g, h)?;
                        g.concat_rows(&[p, e])
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let logits = self.forward_graph(&mut g, &seqs)?;
            Ok(logits
                .iter()
                .map(|&l| {
                    let m = g.value(l);
                    m.row(m.rows() - 1).to_vec()
                })
                .collect())
        })?;
        Ok(out.tokens)
    }

    /// Generation from a text payload under `task`'s template.
    pub fn generate_text(&self, task: Task, payload: &[usize], cfg: &DecodeConfig) -> Result<Vec<usize>> {
        let prompt = self.embed(&task.template().render(payload))?;
        self.generate(&prompt, cfg)
    }

    /// SHA-256 of the logits on a fixed probe prompt.
    pub fn probe_digest(&self) -> Result<String> {
        let probe = Task::Transcribe.template().render(&[LETTER_A, LETTER_A + 1, SPACE, LETTER_A + 2]);
        let logits = self.lm_forward(&self.embed(&probe)?)?;
        let mut h = Sha256::new();
        for v in logits.data() {
            h.update(v.to_le_bytes());
        }
        Ok(hex(&h.finalize()))
    }
}

/// Mean response-token cross-entropy of a batch under the LM tensors in
/// `params`, as a graph node. Every response ends with the end token.
pub fn response_nll(g: &mut Graph, params: &ParamSet, layout: &LmLayout, batch: &[&TextExample]) -> Result<(Var, usize)> {
    let mut seqs = Vec::with_capacity(batch.len());
    for ex in batch {
        let mut toks = ex.prompt();
        toks.extend_from_slice(&ex.response);
        seqs.push(layout.embed_graph(g, params, &toks)?);
    }
    let logits = layout.forward(g, params, &seqs)?;
    let mut picks = Vec::new();
    let mut rows = Vec::new();
    let mut base = 0;
    for (ex, &l) in batch.iter().zip(&logits) {
        let n = g.value(l).rows();
        let start = ex.prompt().len() - 1;
        for (j, &t) in ex.response.iter().chain(std::iter::once(&EOS)).enumerate() {
            let row = base + start + j;
            rows.push(row);
            picks.push(t);
        }
        base += n;
    }
    let all = if logits.len() == 1 { logits[0] } else { g.concat_rows(&logits)? };
    let sel = g.gather_rows(all, &rows)?;
    let lp = g.log_softmax(sel);
    let v = g.value(lp).cols();
    let count = picks.len();
    let entries = picks.iter().enumerate().map(|(r, &t)| (0, r * v + t, -1.0 / count as f64)).collect();
    Ok((g.weighted(lp, 1, 1, entries, None)?, count))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub lm: LmConfig,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop early once held-out response perplexity falls to this value.
    pub stop_perplexity: f64,
    /// Usability gate on held-out response perplexity.
    pub max_perplexity: f64,
    /// Usability gate on per-task exact match.
    pub min_competence: f64,
    /// Held-out lines per task used to measure competence.
    pub competence_samples: usize,
    pub decode: DecodeConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lm: LmConfig::default(),
            optimizer: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
            batch_size: 16,
            max_epochs: 30,
            stop_perplexity: 1.001,
            max_perplexity: 1.35,
            min_competence: 0.95,
            competence_samples: 200,
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_nll: f64,
    pub heldout_perplexity: f64,
}

/// Perplexity over response tokens (end token included).
pub fn response_perplexity(params: &ParamSet, layout: &LmLayout, lines: &[TextExample]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for chunk in lines.chunks(32) {
        let refs: Vec<&TextExample> = chunk.iter().collect();
        let mut g = Graph::new();
        let (loss, n) = response_nll(&mut g, params, layout, &refs)?;
        total += g.value(loss).item() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Empty("held-out lines"));
    }
    Ok((total / count as f64).exp())
}

/// Exact-match rate of generated responses for each task present in `lines`.
pub fn text_competence(lm: &FrozenLM, lines: &[TextExample], per_task: usize, decode: &DecodeConfig) -> Result<BTreeMap<Task, f64>> {
    if lines.is_empty() {
        return Err(Error::Empty("held-out lines"));
    }
    let mut out = BTreeMap::new();
    for task in Task::ALL {
        let picked: Vec<&TextExample> = lines.iter().filter(|l| l.task == task).take(per_task).collect();
        if picked.is_empty() {
            continue;
        }
        let mut hits = 0;
        for ex in &picked {
            if lm.generate_text(task, &ex.payload, decode)? == ex.response {
                hits += 1;
            }
        }
        out.insert(task, hits as f64 / picked.len() as f64);
    }
    Ok(out)
}

/// Trains a fresh LM on instruction lines, freezes it and measures held-out
/// perplexity and per-task competence.
pub fn pretrain_fixture(
    train: &[TextExample],
    heldout: &[TextExample],
    cfg: &PretrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&PretrainEpoch),
) -> Result<(FrozenLM, FixtureMeta)> {
    if train.is_empty() {
        return Err(Error::Empty("pretraining corpus"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let mut params = ParamSet::new();
    let layout = LmLayout::register(&mut params, cfg.lm, &mut init_rng)?;
    let mut opt = Adam::new(cfg.optimizer, &params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size.max(1));
    let total_steps = (batches_per_epoch * cfg.max_epochs).max(1);
    let mut ppl = f64::INFINITY;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            // Linear decay to a tenth of the base rate.
            let progress = opt.step as f64 / total_steps as f64;
            opt.cfg.lr = cfg.optimizer.lr * (1.0 - 0.9 * progress);
            let batch: Vec<&TextExample> = chunk.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let (loss, _) = response_nll(&mut g, &params, &layout, &batch)?;
            sum += g.value(loss).item();
            let mut grads = backprop(&g, loss, &params)?;
            opt.update(&mut params, &mut grads);
        }
        ppl = response_perplexity(&params, &layout, heldout)?;
        let rec = PretrainEpoch { epoch: epoch + 1, train_nll: sum / batches_per_epoch as f64, heldout_perplexity: ppl };
        on_epoch(&rec);
        history.push(rec);
        if ppl <= cfg.stop_perplexity {
            break;
        }
    }
    let lm = FrozenLM::new(params, cfg.lm)?;
    let competence = text_competence(&lm, heldout, cfg.competence_samples, &cfg.decode)?;
    let usable = ppl <= cfg.max_perplexity
        && competence.len() == Task::ALL.len()
        && competence.values().all(|&c| c >= cfg.min_competence);
    let meta = FixtureMeta {
        version: FIXTURE_VERSION,
        seed,
        config: cfg.lm,
        checksum: lm.checksum().to_string(),
        probe_digest: lm.probe_digest()?,
        heldout_perplexity: ppl,
        competence: competence.into_iter().map(|(t, c)| (t.name().to_string(), c)).collect(),
        usable,
        epochs: history.len(),
    };
    Ok((lm, meta))
}
