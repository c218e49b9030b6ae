use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::toyllm::VOCAB_SIZE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpeechConfig {
    pub d_in: usize,
    /// Frames per token are drawn uniformly from `min_dur..=max_dur`.
    pub min_dur: usize,
    pub max_dur: usize,
    pub sigma: f64,
    /// Scale of the per-utterance offset vector; zero disables it.
    pub offset_scale: f64,
}

impl Default for SpeechConfig {
    fn default() -> Self {
        Self { d_in: 16, min_dur: 24, max_dur: 40, sigma: 0.1, offset_scale: 0.05 }
    }
}

/// Codebook of one prototype feature vector per vocabulary symbol.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSpeechSpec {
    pub cfg: SpeechConfig,
    pub codebook: Matrix,
}

impl PseudoSpeechSpec {
    /// Draws prototypes until all pairs are more than 4σ apart.
    pub fn new(cfg: SpeechConfig, seed: u64) -> Result<Self> {
        if cfg.d_in == 0 || cfg.min_dur == 0 || cfg.max_dur < cfg.min_dur || !(cfg.sigma >= 0.0) || !(cfg.offset_scale >= 0.0) {
            return Err(Error::Config("speech config needs d_in ≥ 1, 1 ≤ min_dur ≤ max_dur and non-negative noise".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let data: Vec<f64> = (0..VOCAB_SIZE * cfg.d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
            let spec = Self { codebook: Matrix::from_vec(VOCAB_SIZE, cfg.d_in, data)?, cfg: cfg.clone() };
            if spec.min_prototype_distance() > 4.0 * cfg.sigma {
                return Ok(spec);
            }
        }
        Err(Error::Config("could not draw distinguishable prototypes; lower sigma or raise d_in".into()))
    }

    pub fn min_prototype_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.codebook.rows() {
            for b in a + 1..self.codebook.rows() {
                best = best.min(dist2(self.codebook.row(a), self.codebook.row(b)).sqrt());
            }
        }
        best
    }

    /// Frames for `tokens`: per token a uniform duration of copies of its
    /// prototype, plus Gaussian noise and one offset shared by the utterance.
    pub fn render(&self, tokens: &[usize], seed: u64) -> Result<Matrix> {
        self.render_with(tokens, &mut ChaCha8Rng::seed_from_u64(seed), None)
    }

    /// Rendering with an explicit generator; `durations` overrides the draw.
    pub fn render_with(&self, tokens: &[usize], rng: &mut impl Rng, durations: Option<&[usize]>) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence to render"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.codebook.rows()) {
            return Err(Error::UnknownToken(bad));
        }
        if durations.is_some_and(|d| d.len() != tokens.len()) {
            return Err(Error::LengthMismatch { what: "durations vs tokens", left: durations.map_or(0, <[usize]>::len), right: tokens.len() });
        }
        let d = self.cfg.d_in;
        let noise = Normal::new(0.0, self.cfg.sigma).map_err(|e| Error::Config(e.to_string()))?;
        let offset_dist = Normal::new(0.0, self.cfg.offset_scale).map_err(|e| Error::Config(e.to_string()))?;
        let offset: Vec<f64> = (0..d).map(|_| offset_dist.sample(rng)).collect();
        let mut data = Vec::new();
        for (i, &t) in tokens.iter().enumerate() {
            let dur = match durations {
                Some(ds) => ds[i],
                None => rng.random_range(self.cfg.min_dur..=self.cfg.max_dur),
            };
            for _ in 0..dur {
                for (j, &p) in self.codebook.row(t).iter().enumerate() {
                    data.push(p + noise.sample(rng) + offset[j]);
                }
            }
        }
        let rows = data.len() / d;
        Matrix::from_vec(rows, d, data)
    }

    /// Index of the nearest prototype.
    pub fn nearest(&self, frame: &[f64]) -> usize {
        (0..self.codebook.rows())
            .min_by(|&a, &b| dist2(frame, self.codebook.row(a)).total_cmp(&dist2(frame, self.codebook.row(b))))
            .unwrap_or(0)
    }

    /// Nearest-prototype label per frame with repeats collapsed.
    pub fn nearest_transcript(&self, frames: &Matrix) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for r in 0..frames.rows() {
            let s = self.nearest(frames.row(r));
            if out.last() != Some(&s) {
                out.push(s);
            }
        }
        out
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_unit_durations_reproduce_codebook() {
        let cfg = SpeechConfig { sigma: 0.0, offset_scale: 0.0, ..Default::default() };
        let spec = PseudoSpeechSpec::new(cfg, 3).unwrap();
        let toks = [14, 15, 13, 16];
        let f = spec.render_with(&toks, &mut ChaCha8Rng::seed_from_u64(0), Some(&[1, 1, 1, 1])).unwrap();
        for (r, &t) in toks.iter().enumerate() {
            assert_eq!(f.row(r), spec.codebook.row(t));
        }
    }

    #[test]
    fn length_bounds_and_determinism() {
        let spec = PseudoSpeechSpec::new(SpeechConfig::default(), 3).unwrap();
        assert!(spec.min_prototype_distance() > 0.4);
        let toks = [14, 20, 13, 30, 31];
        for seed in 0..50 {
            let f = spec.render(&toks, seed).unwrap();
            assert!(f.rows() >= toks.len() * 24 && f.rows() <= toks.len() * 40);
            assert_eq!(f, spec.render(&toks, seed).unwrap());
        }
        assert!(spec.render(&[], 0).is_err());
        assert!(spec.render(&[99], 0).is_err());
    }

    #[test]
    fn nearest_prototype_recovers_tokens() {
        let spec = PseudoSpeechSpec::new(SpeechConfig::default(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (mut frames_ok, mut frames) = (0, 0);
        for i in 0..200 {
            let toks: Vec<usize> = (0..8).map(|j| 13 + (i * 7 + j * 3) % 27).collect();
            let f = spec.render(&toks, rng.random()).unwrap();
            assert_eq!(spec.nearest_transcript(&f), toks);
            frames += f.rows();
            frames_ok += (0..f.rows()).filter(|&r| toks.contains(&spec.nearest(f.row(r)))).count();
        }
        assert!(frames_ok as f64 / frames as f64 >= 0.999);
    }
}
