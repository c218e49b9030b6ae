use rand::Rng;

use crate::baselines::EncoderLlm;
use crate::cif::{cif_graph, FireEvent, Projection, TailPolicy};
use crate::diffmath::{Graph, ParamSet, Var};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::matrix::Matrix;
use crate::toyllm::{DecodeConfig, EmbeddedSequence, FrozenLM, PromptTemplate, Role};

/// Encoder, CIF and an affine map into the LM embedding space.
#[derive(Clone, Debug)]
pub struct Wav2Prompt {
    pub encoder: Encoder,
    pub proj: Projection,
}

impl Wav2Prompt {
    pub fn register(params: &mut ParamSet, cfg: EncoderConfig, d_llm: usize, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_out;
        let encoder = Encoder::register(params, "enc", cfg, rng)?;
        let proj = Projection::register(params, "w2p.fc", rng, d - 1, d_llm);
        Ok(Self { encoder, proj })
    }
}

/// A trainable system that turns speech features into an LM prompt payload.
#[derive(Clone, Debug)]
pub enum PromptSystem {
    Wav2Prompt(Wav2Prompt),
    EncoderLlm(EncoderLlm),
}

/// Payload rows plus the CIF quantities they came from.
pub struct SpeechPrompt {
    pub payload: Var,
    /// Raw firing weights (T×1); absent for fixed-rate systems.
    pub alpha: Option<Var>,
    pub events: Vec<FireEvent>,
}

/// How CIF integrates: scaled to a known length, or raw weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Integrate {
    Scaled(usize),
    Raw(TailPolicy),
}

impl PromptSystem {
    pub fn encoder(&self) -> &Encoder {
        match self {
            PromptSystem::Wav2Prompt(w) => &w.encoder,
            PromptSystem::EncoderLlm(e) => &e.encoder,
        }
    }

    pub fn uses_cif(&self) -> bool {
        matches!(self, PromptSystem::Wav2Prompt(_))
    }

    pub fn speech_prompt(&self, g: &mut Graph, params: &ParamSet, x: Var, how: Integrate, threshold: f64) -> Result<SpeechPrompt> {
        match self {
            PromptSystem::Wav2Prompt(w) => {
                let e = w.encoder.forward(g, params, x)?;
                let (target, tail) = match how {
                    Integrate::Scaled(m) => (Some(m), TailPolicy::Drop),
                    Integrate::Raw(tail) => (None, tail),
                };
                let nodes = cif_graph(g, params, e, &w.proj, target, threshold, tail)?;
                Ok(SpeechPrompt { payload: nodes.reps, alpha: Some(nodes.alpha), events: nodes.events })
            }
            PromptSystem::EncoderLlm(m) => Ok(SpeechPrompt { payload: m.forward(g, params, x)?, alpha: None, events: Vec::new() }),
        }
    }

    /// Payload rows at inference time (raw weights).
    pub fn payload(&self, params: &ParamSet, frames: &Matrix, threshold: f64, tail: TailPolicy) -> Result<Matrix> {
        let mut g = Graph::new();
        let x = g.input(frames.clone());
        let sp = self.speech_prompt(&mut g, params, x, Integrate::Raw(tail), threshold)?;
        Ok(g.value(sp.payload).clone())
    }

    /// Generates a response to `frames` under `template`.
    pub fn infer(
        &self,
        params: &ParamSet,
        lm: &FrozenLM,
        frames: &Matrix,
        template: &PromptTemplate,
        decode: &DecodeConfig,
        threshold: f64,
        tail: TailPolicy,
    ) -> Result<Vec<usize>> {
        let payload = EmbeddedSequence::new(self.payload(params, frames, threshold, tail)?, Role::Speech);
        let prompt = lm.prompt_with_payload(template, &payload)?;
        lm.generate(&prompt, decode)
    }
}
