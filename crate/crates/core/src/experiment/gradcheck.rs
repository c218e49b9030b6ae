//! Finite-difference checks of every trainable objective on tiny instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{ctc_objective, CtcModel, EncoderLlm};
use crate::diffmath::{finite_diff_check_structured, CheckConfig, GradReport, ParamSet};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::matrix::Matrix;
use crate::synthdata::Record;
use crate::toyllm::{FrozenLM, LmConfig, LmLayout, Task, LETTER_A, NUM_LETTERS, VOCAB_SIZE};
use crate::training::{objective, PromptSystem, Regime, TrainConfig, Wav2Prompt};

/// Tolerance on the maximum relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradCase {
    pub name: String,
    pub passed: bool,
    pub max_rel_err: f64,
    pub checked: usize,
    pub report: GradReport,
}

/// Random one-layer LM with `d_model = 8`.
pub fn tiny_lm(rng: &mut ChaCha8Rng) -> Result<FrozenLM> {
    let cfg = LmConfig { d_model: 8, d_ff: 16, layers: 1, heads: 2, context: 32, ..LmConfig::default() };
    let mut p = ParamSet::new();
    LmLayout::register(&mut p, cfg, rng)?;
    FrozenLM::new(p, cfg)
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig { d_in: 4, hidden: 4, d_out: 4, layers: 1, kernel: 3, ff: 6, firing_bias: -1.0 }
}

/// Records with `T₀ ≤ 48` (so `T ≤ 12`) and 2–4 payload tokens.
pub fn tiny_records(rng: &mut ChaCha8Rng, task: Task, n: usize) -> Vec<Record> {
    (0..n)
        .map(|i| {
            let m = rng.random_range(2..=4);
            let input: Vec<usize> = (0..m).map(|_| LETTER_A + rng.random_range(0..NUM_LETTERS)).collect();
            let t0 = rng.random_range(8 * m..=12 * m);
            let data = (0..t0 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target = match task {
                Task::Reverse => input.iter().rev().copied().collect(),
                _ => input.clone(),
            };
            Record {
                id: format!("tiny-{i}"),
                task,
                target,
                template: task.template().id,
                input,
                frames: Matrix::from_vec(t0, 4, data).expect("sized"),
            }
        })
        .collect()
}

fn case(name: &str, report: GradReport) -> GradCase {
    let max = report.max_rel_err();
    GradCase { name: name.into(), passed: max < GRADCHECK_TOL, max_rel_err: max, checked: report.checked(), report }
}

/// Runs the suite: the ASR-data and fine-tuning objectives of Wav2Prompt,
/// the Encoder-LLM cross-entropy and the CTC loss.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lm = tiny_lm(&mut rng)?;
    // With a loss near ln 40, rounding in the two-point quotient at step 1e-5
    // is ~1e-10, which swamps gradients below 1e-6 under the 1e-8 floor; the
    // fourth-order stencil tolerates a step large enough to suppress it.
    let check = CheckConfig { step: 1e-2, seed, five_point: true, ..CheckConfig::default() };
    let cfg = TrainConfig::default();
    let mut out = Vec::new();

    let mut p = ParamSet::new();
    let w2p = PromptSystem::Wav2Prompt(Wav2Prompt::register(&mut p, tiny_encoder(), lm.d_model(), &mut rng)?);
    let asr = tiny_records(&mut rng, Task::Transcribe, 2);
    let batch: Vec<&Record> = asr.iter().collect();
    let r = finite_diff_check_structured(&p, check, |g, set| {
        let o = objective(&w2p, set, &lm, &batch, &cfg, Regime::AsrTrain)?;
        *g = o.graph;
        Ok((o.loss, o.structure))
    })?;
    out.push(case("wav2prompt/asr-train", r));

    let ft = tiny_records(&mut rng, Task::Reverse, 2);
    let batch: Vec<&Record> = ft.iter().collect();
    let r = finite_diff_check_structured(&p, check, |g, set| {
        let o = objective(&w2p, set, &lm, &batch, &cfg, Regime::FewShotFinetune)?;
        *g = o.graph;
        Ok((o.loss, o.structure))
    })?;
    out.push(case("wav2prompt/few-shot-finetune", r));

    let mut p = ParamSet::new();
    let ellm = PromptSystem::EncoderLlm(EncoderLlm::register(&mut p, tiny_encoder(), lm.d_model(), 8, &mut rng)?);
    let batch: Vec<&Record> = asr.iter().collect();
    let r = finite_diff_check_structured(&p, check, |g, set| {
        let o = objective(&ellm, set, &lm, &batch, &cfg, Regime::AsrTrain)?;
        *g = o.graph;
        Ok((o.loss, o.structure))
    })?;
    out.push(case("encoder-llm/ce", r));

    let mut p = ParamSet::new();
    let ctc = CtcModel::register(&mut p, tiny_encoder(), VOCAB_SIZE, &mut rng)?;
    let r = finite_diff_check_structured(&p, check, |g, set| {
        let o = ctc_objective(&ctc, set, &batch)?;
        *g = o.graph;
        Ok((o.loss, o.structure))
    })?;
    out.push(case("ctc", r));
    Ok(out)
}
