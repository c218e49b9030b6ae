use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::DEFAULT_STACK;
use crate::diffmath::AdamConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::synthdata::DataConfig;
use crate::toyllm::{DecodeConfig, PretrainConfig, Task};
use crate::training::{Regime, TrainConfig};

/// The systems compared by the experiments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    #[default]
    Wav2prompt,
    EncoderLlm,
    /// Encoder-LLM initialised from the recogniser and trained only on the
    /// few-shot pairs.
    FlatStartEncoderLlm,
    Cascade,
    Oracle,
}

impl SystemKind {
    pub const ALL: [SystemKind; 5] =
        [SystemKind::Wav2prompt, SystemKind::EncoderLlm, SystemKind::FlatStartEncoderLlm, SystemKind::Cascade, SystemKind::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::Wav2prompt => "wav2prompt",
            SystemKind::EncoderLlm => "encoder-llm",
            SystemKind::FlatStartEncoderLlm => "flat-start-encoder-llm",
            SystemKind::Cascade => "cascade",
            SystemKind::Oracle => "oracle",
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown system {s:?} (expected wav2prompt, encoder-llm, flat-start-encoder-llm, cascade or oracle)"
            ))
        })
    }
}

/// Everything a run depends on. The resolved form is archived with every
/// run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed for model initialisation and shuffling.
    pub seed: u64,
    /// Seed of the synthetic world and the LM fixture.
    pub fixture_seed: u64,
    /// Directory holding the LM fixture and the datasets.
    pub fixtures: PathBuf,
    pub out: PathBuf,
    pub system: SystemKind,
    /// Tasks evaluated by commands that take no explicit task.
    pub tasks: Vec<Task>,
    /// Start the Wav2Prompt encoder from the trained recogniser.
    pub init_from_ctc: bool,
    /// Recogniser checkpoint reused for initialisation and the cascade;
    /// trained on the fly when absent.
    pub ctc_checkpoint: Option<PathBuf>,
    /// Frames stacked per Encoder-LLM payload row.
    pub stack: usize,
    /// Caps the number of records scored per evaluation.
    pub eval_limit: Option<usize>,
    pub data: DataConfig,
    pub lm: PretrainConfig,
    pub encoder: EncoderConfig,
    /// ASR-data training of the prompt systems.
    pub train: TrainConfig,
    /// Recogniser training.
    pub ctc: TrainConfig,
    /// Few-shot fine-tuning.
    pub finetune: TrainConfig,
    /// Decoding at evaluation time.
    pub decode: DecodeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            fixture_seed: 1,
            fixtures: PathBuf::from("fixtures"),
            out: PathBuf::from("runs/default"),
            system: SystemKind::default(),
            tasks: Task::ALL.to_vec(),
            init_from_ctc: true,
            ctc_checkpoint: None,
            stack: DEFAULT_STACK,
            eval_limit: None,
            data: DataConfig::default(),
            lm: PretrainConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            ctc: TrainConfig {
                epochs: 4,
                gamma: 0.0,
                mu: 0.0,
                optimizer: AdamConfig { lr: 2e-3, ..AdamConfig::default() },
                ..TrainConfig::default()
            },
            finetune: TrainConfig { epochs: 10, regime: Regime::FewShotFinetune, val_samples: 50, ..TrainConfig::default() },
            decode: DecodeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lm.lm.validate()?;
        for t in [&self.train, &self.ctc, &self.finetune] {
            t.validate()?;
        }
        if self.stack == 0 {
            return Err(Error::Config("stack must be at least 1".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("task list is empty".into()));
        }
        if self.decode.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        Ok(())
    }

    /// Copy with the stage seeds tied to the master seed and each stage's
    /// regime fixed.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train.regime = Regime::AsrTrain;
        c.ctc.regime = Regime::AsrTrain;
        c.finetune.regime = Regime::FewShotFinetune;
        c.train.seed = self.seed;
        c.ctc.seed = self.seed;
        c.finetune.seed = self.seed;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig { seed: 9, ctc_checkpoint: Some("a/b.ckpt".into()), eval_limit: Some(5), ..Default::default() };
        cfg.train.max_steps = Some(100);
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg: ExperimentConfig = toml::from_str("system = \"encoder-llm\"\n[train]\ngamma = 0.0\n").unwrap();
        assert_eq!(cfg.system, SystemKind::EncoderLlm);
        assert_eq!(cfg.train.gamma, 0.0);
        assert_eq!(cfg.train.mu, 0.05);
        assert!(toml::from_str::<ExperimentConfig>("bogus = 1").is_err());
    }

    #[test]
    fn resolution_ties_stage_seeds() {
        let r = ExperimentConfig { seed: 42, ..Default::default() }.resolved();
        assert_eq!((r.train.seed, r.ctc.seed, r.finetune.seed), (42, 42, 42));
        assert_eq!(r.finetune.regime, Regime::FewShotFinetune);
        assert!(r.validate().is_ok());
    }

    #[test]
    fn checked_in_defaults_match() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
        assert_eq!(ExperimentConfig::load(&path).unwrap(), ExperimentConfig::default().resolved());
        let acceptance = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.toml");
        ExperimentConfig::load(&acceptance).unwrap();
    }

    #[test]
    fn system_names_parse() {
        for k in SystemKind::ALL {
            assert_eq!(k.name().parse::<SystemKind>().unwrap(), k);
        }
        assert!("ctc".parse::<SystemKind>().is_err());
    }
}
