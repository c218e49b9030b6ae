//! Comparison systems: the CTC recogniser and text cascade, the oracle that
//! reads ground-truth text, and the Encoder-LLM with stacked frames.

mod ctc;

use rand::Rng;

use crate::diffmath::{Adam, Graph, ParamSet, Var};
use crate::encoder::{stack_frames_graph, Encoder, EncoderConfig};
use crate::cif::Projection;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::metrics::Scores;
use crate::synthdata::Record;
use crate::toyllm::{DecodeConfig, FrozenLM, PromptTemplate, VOCAB_SIZE};
use crate::training::{fit, EpochRecord, LossBreakdown, Objective, TrainConfig, TrainOutcome};

pub use ctc::{ctc_forward_backward, ctc_greedy_decode, ctc_loss, ctc_loss_graph, CtcModel};

pub const DEFAULT_STACK: usize = 8;

/// Encoder whose frames are stacked `stack` at a time and mapped to the LM
/// embedding width; no length alignment with the text.
#[derive(Clone, Debug)]
pub struct EncoderLlm {
    pub encoder: Encoder,
    pub fc: Projection,
    pub stack: usize,
}

impl EncoderLlm {
    pub fn register(params: &mut ParamSet, cfg: EncoderConfig, d_llm: usize, stack: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_out;
        let encoder = Encoder::register(params, "enc", cfg, rng)?;
        let fc = Projection::register(params, "encllm.fc", rng, stack * d, d_llm);
        Ok(Self { encoder, fc, stack })
    }

    /// Payload rows: `FC(stack(encode(x)))`, `ceil(T/stack)` × d_llm.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let e = self.encoder.forward(g, params, x)?;
        let s = stack_frames_graph(g, e, self.stack)?;
        self.fc.forward(g, params, s)
    }
}

/// Logits of the LM over `[sos] prefix ‖ payload ‖ postfix ‖ response`.
pub fn encoder_llm_forward(
    model: &EncoderLlm,
    params: &ParamSet,
    lm: &FrozenLM,
    frames: &Matrix,
    template: &PromptTemplate,
    response: &[usize],
) -> Result<Matrix> {
    let mut g = Graph::new();
    let x = g.input(frames.clone());
    let payload = model.forward(&mut g, params, x)?;
    let lead = lm.embed_graph(&mut g, &template.lead())?;
    let post = lm.embed_graph(&mut g, &template.postfix)?;
    let resp = lm.embed_graph(&mut g, response)?;
    let seq = g.concat_rows(&[lead, payload, post, resp])?;
    let out = lm.forward_graph(&mut g, &[seq])?;
    Ok(g.value(out[0]).clone())
}

/// Greedy CTC transcript fed as text to the LM. No gradient path exists
/// between the two stages.
pub fn cascade_infer(
    ctc: &CtcModel,
    ctc_params: &ParamSet,
    lm: &FrozenLM,
    frames: &Matrix,
    template: &PromptTemplate,
    decode: &DecodeConfig,
) -> Result<Vec<usize>> {
    let transcript: Vec<usize> = ctc.transcribe(ctc_params, frames)?.into_iter().filter(|&t| t < VOCAB_SIZE).collect();
    oracle_infer(lm, &transcript, template, decode)
}

/// The LM reading ground-truth text.
pub fn oracle_infer(lm: &FrozenLM, text: &[usize], template: &PromptTemplate, decode: &DecodeConfig) -> Result<Vec<usize>> {
    let prompt = lm.embed(&template.render(text))?;
    lm.generate(&prompt, decode)
}

/// Mean CTC loss over a batch, reported in the `ce` slot.
pub fn ctc_objective(model: &CtcModel, params: &ParamSet, batch: &[&Record]) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let mut g = Graph::new();
    let mut terms = Vec::with_capacity(batch.len());
    for rec in batch {
        let x = g.input(rec.frames.clone());
        let logits = model.forward(&mut g, params, x)?;
        terms.push(ctc_loss_graph(&mut g, logits, &rec.input)?);
    }
    let joined = if terms.len() == 1 { terms[0] } else { g.concat_rows(&terms)? };
    let s = g.sum(joined);
    let loss = g.scale(s, 1.0 / batch.len() as f64);
    let v = g.value(loss).item();
    Ok(Objective { graph: g, loss, parts: LossBreakdown::compose(v, 0.0, 0.0, 0.0, 0.0), firing_drift: None, structure: 0 })
}

/// Greedy-decode scores of the recogniser against the transcripts.
pub fn evaluate_ctc(model: &CtcModel, params: &ParamSet, records: &[Record]) -> Result<Scores> {
    let hyps = records.iter().map(|r| model.transcribe(params, &r.frames)).collect::<Result<Vec<_>>>()?;
    Ok(Scores::from_pairs(hyps.iter().zip(records).map(|(h, r)| (h.as_slice(), r.input.as_slice()))))
}

/// Trains the recogniser on transcripts with the shared epoch loop.
pub fn train_ctc(
    model: &CtcModel,
    params: ParamSet,
    train: &[Record],
    val: &[Record],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    train_ctc_from(model, params, None, train, val, cfg, on_epoch)
}

/// [`train_ctc`] continuing from saved optimizer moments.
pub fn train_ctc_from(
    model: &CtcModel,
    params: ParamSet,
    resume: Option<Adam>,
    train: &[Record],
    val: &[Record],
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let val = &val[..val.len().min(cfg.val_samples)];
    fit(
        params,
        resume,
        cfg,
        train.len(),
        |p, idx| {
            let batch: Vec<&Record> = idx.iter().map(|&i| &train[i]).collect();
            ctc_objective(model, p, &batch)
        },
        |p| if val.is_empty() { Ok(None) } else { Ok(Some(evaluate_ctc(model, p, val)?.token_accuracy)) },
        on_epoch,
    )
}
