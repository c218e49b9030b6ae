//! Checkpoint container.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! magic      8 bytes  "W2PCKPT\0"
//! version    u32
//! header_len u32, then the header as JSON
//! values     f64 × Σ tensor sizes: parameters, then the first and second
//!            Adam moments, each in header tensor order
//! ```
//!
//! The frozen LM is not stored; the header records its checksum.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use crate::diffmath::{Adam, AdamConfig, ParamSet};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::training::EpochRecord;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"W2PCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Which parameter layout a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Ctc,
    Wav2prompt,
    EncoderLlm,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::Ctc => "ctc",
            ModelKind::Wav2prompt => "wav2prompt",
            ModelKind::EncoderLlm => "encoder-llm",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelKind,
    pub config: ExperimentConfig,
    pub lm_checksum: String,
    /// Checksum of the stored parameters.
    pub params_checksum: String,
    /// SHA-256 of the value section (parameters and optimizer moments).
    pub values_checksum: String,
    pub epoch: usize,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub optimizer: AdamConfig,
    pub step: u64,
    pub tensors: Vec<TensorMeta>,
}

/// Trainable parameters with their optimizer state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamSet,
    pub optimizer: Adam,
}

impl Checkpoint {
    pub fn new(
        model: ModelKind,
        config: ExperimentConfig,
        lm_checksum: &str,
        params: ParamSet,
        optimizer: Adam,
        history: Vec<EpochRecord>,
        best_epoch: usize,
    ) -> Self {
        let tensors =
            params.iter().map(|(_, p)| TensorMeta { name: p.name().to_string(), rows: p.value().rows(), cols: p.value().cols() }).collect();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            model,
            config,
            lm_checksum: lm_checksum.to_string(),
            params_checksum: params.checksum(),
            values_checksum: String::new(),
            epoch: history.len(),
            best_epoch,
            history,
            optimizer: optimizer.cfg,
            step: optimizer.step,
            tensors,
        };
        let mut c = Self { header, params, optimizer };
        c.header.values_checksum = hex_sha256(&c.values());
        c
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let values = self.values();
        let mut out = Vec::with_capacity(16 + header.len() + values.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&values);
        out
    }

    fn values(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 * self.params.num_scalars());
        let mut put = |m: &Matrix| {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, p) in self.params.iter() {
            put(p.value());
        }
        for moments in [&self.optimizer.m, &self.optimizer.v] {
            for (id, p) in self.params.iter() {
                match &moments[id.index()] {
                    Some(m) => put(m),
                    None => put(&Matrix::zeros(p.value().rows(), p.value().cols())),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let header_bytes = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes).map_err(|e| bad(format!("header: {e}")))?;
        let sizes: Vec<usize> = header.tensors.iter().map(|t| t.rows * t.cols).collect();
        let total: usize = sizes.iter().sum();
        let body = &bytes[16 + len..];
        if body.len() != 3 * total * 8 {
            return Err(bad(format!("expected {} value bytes, found {}", 3 * total * 8, body.len())));
        }
        if hex_sha256(body) != header.values_checksum {
            return Err(Error::Integrity(format!("{}: value checksum mismatch", path.display())));
        }
        let mut values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut take = |t: &TensorMeta| Matrix::from_vec(t.rows, t.cols, values.by_ref().take(t.rows * t.cols).collect());
        let mut params = ParamSet::new();
        for t in &header.tensors {
            params.add(t.name.clone(), take(t)?, true);
        }
        let mut optimizer = Adam::new(header.optimizer, &params);
        optimizer.step = header.step;
        for i in 0..header.tensors.len() {
            optimizer.m[i] = Some(take(&header.tensors[i])?);
        }
        for i in 0..header.tensors.len() {
            optimizer.v[i] = Some(take(&header.tensors[i])?);
        }
        if params.checksum() != header.params_checksum {
            return Err(Error::Integrity(format!("{}: parameter checksum mismatch", path.display())));
        }
        Ok(Self { header, params, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Fails unless the checkpoint was trained against the LM with `checksum`.
    pub fn verify_lm(&self, checksum: &str) -> Result<()> {
        if self.header.lm_checksum != checksum {
            return Err(Error::Integrity(format!(
                "checkpoint was trained against LM {} but the fixture is {checksum}",
                self.header.lm_checksum
            )));
        }
        Ok(())
    }

    /// Copies the stored values into a freshly registered `target`, which
    /// must have exactly the stored names and shapes.
    pub fn restore_into(&self, target: &mut ParamSet) -> Result<()> {
        let names: Vec<String> = target.iter().map(|(_, p)| p.name().to_string()).collect();
        let stored: Vec<String> = self.header.tensors.iter().map(|t| t.name.clone()).collect();
        if names != stored || target.load_matching(&self.params) != stored.len() {
            return Err(Error::Integrity(format!("checkpoint tensors {stored:?} do not match the configured model {names:?}")));
        }
        Ok(())
    }
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{backprop, Graph};
    use crate::training::LossBreakdown;

    fn sample() -> Checkpoint {
        let mut p = ParamSet::new();
        let w = p.add("enc.w", Matrix::from_vec(2, 3, vec![0.1, -0.2, 1.0 / 3.0, 4.0, 5e-300, -0.0]).unwrap(), true);
        p.add("enc.b", Matrix::column(&[std::f64::consts::PI]), true);
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let mut g = Graph::new();
        let v = g.param(&p, w);
        let s = g.mul(v, v).unwrap();
        let l = g.sum(s);
        let mut grads = backprop(&g, l, &p).unwrap();
        opt.update(&mut p, &mut grads);
        let rec = EpochRecord {
            epoch: 1,
            split: "train".into(),
            steps: 1,
            loss: LossBreakdown::compose(0.1, 0.2, 0.3, 20.0, 0.05),
            grad_norm: 1.0 / 7.0,
            firing_drift: Some(0.1),
            val_token_accuracy: None,
        };
        Checkpoint::new(ModelKind::Wav2prompt, ExperimentConfig::default(), "abc", p, opt, vec![rec], 1)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.header, c.header);
        assert!(back.params.same_values(&c.params));
        assert_eq!(back.optimizer, c.optimizer);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corruption_is_rejected() {
        let c = sample();
        let mut bytes = c.to_bytes();
        let n = bytes.len();
        bytes[n - 3 * 8 * 7 + 1] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes, Path::new("mem")), Err(Error::Integrity(_))));
        let mut moments = c.to_bytes();
        moments[n - 2] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&moments, Path::new("mem")), Err(Error::Integrity(_))));
        assert!(Checkpoint::from_bytes(&bytes[..n - 1], Path::new("mem")).is_err());
        assert!(Checkpoint::from_bytes(b"W2PLMFX\0xxxxxxxx", Path::new("mem")).is_err());
        assert!(c.verify_lm("abd").is_err());
    }

    #[test]
    fn restore_requires_matching_layout() {
        let c = sample();
        let mut same = ParamSet::new();
        same.add("enc.w", Matrix::zeros(2, 3), true);
        same.add("enc.b", Matrix::zeros(1, 1), true);
        c.restore_into(&mut same).unwrap();
        assert!(same.same_values(&c.params));
        let mut other = ParamSet::new();
        other.add("enc.w", Matrix::zeros(3, 2), true);
        other.add("enc.b", Matrix::zeros(1, 1), true);
        assert!(c.restore_into(&mut other).is_err());
    }
}
