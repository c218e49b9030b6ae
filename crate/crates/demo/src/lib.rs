//! WebAssembly bindings for the static page in `www/`. Every function takes
//! plain values and returns a JSON string; errors come back as
//! `{"error": "..."}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;
use wav2prompt::baselines::{ctc_forward_backward, ctc_greedy_decode};
use wav2prompt::cif::{fire_events, scale_weights, FireEvent, FiringWeights, Integration, TailPolicy};
use wav2prompt::encoder::{output_len, DOWNSAMPLE};
use wav2prompt::synthdata::{PseudoSpeechSpec, SpeechConfig};
use wav2prompt::toyllm::{Vocabulary, VOCAB_SIZE};
use wav2prompt::Matrix;

const STACK: usize = 8;

#[derive(Serialize)]
struct PartOut {
    frame: usize,
    weight: f64,
}

#[derive(Serialize)]
struct EventOut {
    index: usize,
    complete: bool,
    parts: Vec<PartOut>,
}

#[derive(Serialize)]
struct IntegrationOut {
    alphas: Vec<f64>,
    total: f64,
    events: Vec<EventOut>,
    residual: f64,
}

fn events_out(alphas: Vec<f64>, integ: Integration) -> IntegrationOut {
    let events = integ
        .events
        .iter()
        .map(|e: &FireEvent| EventOut {
            index: e.index,
            complete: e.complete,
            parts: e.parts.iter().map(|p| PartOut { frame: p.frame, weight: p.weight }).collect(),
        })
        .collect();
    IntegrationOut { total: alphas.iter().sum(), alphas, events, residual: integ.residual }
}

fn json<T: Serialize>(r: Result<T, String>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| format!("{{\"error\":\"{e}\"}}")),
        Err(e) => serde_json::json!({ "error": e }).to_string(),
    }
}

fn parse_weights(text: &str) -> Result<Vec<f64>, String> {
    let w = text
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    if w.is_empty() {
        return Err("enter at least one firing weight".into());
    }
    if w.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err("firing weights lie in [0, 1]".into());
    }
    Ok(w)
}

#[derive(Serialize)]
struct CifOut {
    raw: IntegrationOut,
    scaled: Option<IntegrationOut>,
}

/// Integrate-and-fire over comma-separated weights, raw and (when
/// `target_len > 0`) rescaled to sum to `target_len`.
#[wasm_bindgen]
pub fn cif_events(weights: &str, threshold: f64, target_len: usize) -> String {
    json((|| {
        if !(threshold > 0.0) {
            return Err("threshold must be positive".to_string());
        }
        let alphas = parse_weights(weights)?;
        let raw = events_out(alphas.clone(), fire_events(&alphas, threshold, TailPolicy::FireIfAtLeastHalf));
        let scaled = if target_len > 0 {
            let s = scale_weights(&FiringWeights::raw(alphas), target_len).map_err(|e| e.to_string())?;
            let a = s.alphas().to_vec();
            Some(events_out(a.clone(), fire_events(&a, threshold, TailPolicy::Drop)))
        } else {
            None
        };
        Ok(CifOut { raw, scaled })
    })())
}

#[derive(Serialize)]
struct SpeechOut {
    rows: usize,
    cols: usize,
    /// Row-major features.
    frames: Vec<f64>,
    /// `[start, end)` frame span of each token.
    spans: Vec<(usize, usize)>,
    symbols: Vec<String>,
    nearest: String,
    encoder_frames: usize,
    stacked_rows: usize,
}

fn render(text: &str, seed: u64, sigma: f64) -> Result<(PseudoSpeechSpec, Vec<usize>, Vec<usize>, Matrix), String> {
    let vocab = Vocabulary::standard();
    let tokens = vocab.encode_text(text.trim()).map_err(|e| e.to_string())?;
    if tokens.is_empty() {
        return Err("type a few lowercase letters".into());
    }
    let cfg = SpeechConfig { sigma: sigma.max(0.0), ..SpeechConfig::default() };
    let spec = PseudoSpeechSpec::new(cfg.clone(), seed).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let durations: Vec<usize> = tokens.iter().map(|_| rng.random_range(cfg.min_dur..=cfg.max_dur)).collect();
    let frames = spec.render_with(&tokens, &mut rng, Some(&durations)).map_err(|e| e.to_string())?;
    Ok((spec, tokens, durations, frames))
}

/// Renders `text` as pseudo-speech and decodes it back by nearest prototype.
#[wasm_bindgen]
pub fn render_speech(text: &str, seed: u64, sigma: f64) -> String {
    json((|| {
        let (spec, tokens, durations, frames) = render(text, seed, sigma)?;
        let vocab = Vocabulary::standard();
        let mut spans = Vec::new();
        let mut at = 0;
        for d in &durations {
            spans.push((at, at + d));
            at += d;
        }
        let t = output_len(frames.rows());
        Ok(SpeechOut {
            rows: frames.rows(),
            cols: frames.cols(),
            frames: frames.data().to_vec(),
            spans,
            symbols: tokens.iter().map(|&t| vocab.symbol(t).unwrap_or("?").to_string()).collect(),
            nearest: vocab.decode(&spec.nearest_transcript(&frames)).map_err(|e| e.to_string())?,
            encoder_frames: t,
            stacked_rows: t.div_ceil(STACK),
        })
    })())
}

#[derive(Serialize)]
struct CtcOut {
    frames: usize,
    greedy: String,
    loss: f64,
    /// Per frame: most likely label (`-` for blank) and its posterior.
    best: Vec<(String, f64)>,
}

/// CTC over frame posteriors built from prototype distances: label logits
/// are `−sharpness·‖x − prototype‖²`, the blank has logit `blank`. Frames are
/// averaged in groups of four to mimic the encoder rate.
#[wasm_bindgen]
pub fn ctc_demo(text: &str, seed: u64, sigma: f64, sharpness: f64, blank: f64) -> String {
    json((|| {
        let (spec, tokens, _, frames) = render(text, seed, sigma)?;
        let vocab = Vocabulary::standard();
        let t = output_len(frames.rows());
        let k = VOCAB_SIZE + 1;
        let mut lp = Matrix::zeros(t, k);
        for r in 0..t {
            let lo = r * DOWNSAMPLE;
            let hi = (lo + DOWNSAMPLE).min(frames.rows());
            let mut mean = vec![0.0; frames.cols()];
            for f in lo..hi {
                for (m, x) in mean.iter_mut().zip(frames.row(f)) {
                    *m += x / (hi - lo) as f64;
                }
            }
            let mut logits: Vec<f64> = (0..VOCAB_SIZE)
                .map(|v| -sharpness * spec.codebook.row(v).iter().zip(&mean).map(|(p, x)| (p - x) * (p - x)).sum::<f64>())
                .collect();
            logits.push(blank);
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
            for (c, l) in logits.iter().enumerate() {
                lp.set(r, c, l - z);
            }
        }
        let (loss, _) = ctc_forward_backward(&lp, &tokens).map_err(|e| e.to_string())?;
        let greedy: Vec<usize> = ctc_greedy_decode(&lp);
        let best = (0..t)
            .map(|r| {
                let c = lp.argmax_row(r);
                let sym = if c == VOCAB_SIZE { "-".to_string() } else { vocab.symbol(c).unwrap_or("?").to_string() };
                (sym, lp.get(r, c).exp())
            })
            .collect();
        Ok(CtcOut { frames: t, greedy: vocab.decode(&greedy).map_err(|e| e.to_string())?, loss, best })
    })())
}
