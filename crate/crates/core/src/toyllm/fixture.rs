//! Fixture container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "W2PLMFX\0"
//! version    u32
//! config_len u32, then config as JSON
//! checksum   64 ASCII hex bytes (SHA-256 of the parameters)
//! count      u64 number of doubles
//! values     count × f64, tensors in declaration order, row-major
//! ```
//!
//! Metadata lives next to it in `<file>.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{tensor_specs, LmConfig};
use super::FrozenLM;
use crate::diffmath::ParamSet;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

pub const FIXTURE_MAGIC: &[u8; 8] = b"W2PLMFX\0";
pub const FIXTURE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureMeta {
    pub version: u32,
    pub seed: u64,
    pub config: LmConfig,
    pub checksum: String,
    /// Digest of the logits on a fixed probe prompt, recorded at creation.
    pub probe_digest: String,
    pub heldout_perplexity: f64,
    pub competence: BTreeMap<String, f64>,
    pub usable: bool,
    pub epochs: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl FrozenLM {
    pub fn to_bytes(&self) -> Vec<u8> {
        let config = serde_json::to_vec(self.config()).expect("config serialises");
        let count = self.params().num_scalars();
        let mut out = Vec::with_capacity(96 + config.len() + 8 * count);
        out.extend_from_slice(FIXTURE_MAGIC);
        out.extend_from_slice(&FIXTURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(&config);
        out.extend_from_slice(self.checksum().as_bytes());
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for (_, p) in self.params().iter() {
            for v in p.value().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::Integrity(format!("fixture: {why}"));
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated header"))? != FIXTURE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != FIXTURE_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let clen = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let cfg: LmConfig = serde_json::from_slice(r.take(clen).ok_or_else(|| bad("truncated config"))?)
            .map_err(|e| bad(&format!("config: {e}")))?;
        cfg.validate()?;
        let recorded = std::str::from_utf8(r.take(64).ok_or_else(|| bad("truncated checksum"))?)
            .map_err(|_| bad("checksum is not text"))?
            .to_string();
        let count = r.u64().ok_or_else(|| bad("truncated header"))? as usize;
        let specs = tensor_specs(&cfg);
        if count != specs.iter().map(|(_, a, b)| a * b).sum::<usize>() {
            return Err(bad("value count does not match config"));
        }
        let mut params = ParamSet::new();
        for (name, rows, cols) in specs {
            let raw = r.take(rows * cols * 8).ok_or_else(|| bad("truncated values"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.add(name, Matrix::from_vec(rows, cols, data)?, false);
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        let lm = FrozenLM::new(params, cfg)?;
        if lm.checksum() != recorded {
            return Err(Error::Integrity(format!("fixture checksum mismatch: recorded {recorded}, computed {}", lm.checksum())));
        }
        Ok(lm)
    }

    /// Writes the fixture and its metadata sidecar.
    pub fn save(&self, path: &Path, meta: &FixtureMeta) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(meta).expect("metadata serialises");
        fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
    }

    /// Loads and verifies a fixture: checksum against the file header and
    /// the sidecar, and the probe logits against the recorded digest.
    pub fn load(path: &Path) -> Result<(Self, FixtureMeta)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let lm = Self::from_bytes(&bytes)?;
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: FixtureMeta = serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        if meta.checksum != lm.checksum() {
            return Err(Error::Integrity(format!("fixture sidecar checksum {} does not match parameters {}", meta.checksum, lm.checksum())));
        }
        if meta.probe_digest != lm.probe_digest()? {
            return Err(Error::Integrity("fixture probe logits differ from those recorded at creation".into()));
        }
        Ok((lm, meta))
    }

    /// Like [`FrozenLM::load`], refusing fixtures that failed their gates.
    pub fn load_usable(path: &Path) -> Result<(Self, FixtureMeta)> {
        let (lm, meta) = Self::load(path)?;
        if !meta.usable {
            return Err(Error::FixtureUnusable(format!(
                "{} (perplexity {:.4}, competence {:?})",
                path.display(),
                meta.heldout_perplexity,
                meta.competence
            )));
        }
        Ok((lm, meta))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::toyllm::LmLayout;

    fn lm() -> (FrozenLM, FixtureMeta) {
        let cfg = LmConfig { d_model: 8, d_ff: 16, context: 16, ..Default::default() };
        let mut params = ParamSet::new();
        LmLayout::register(&mut params, cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let lm = FrozenLM::new(params, cfg).unwrap();
        let meta = FixtureMeta {
            version: FIXTURE_VERSION,
            seed: 9,
            config: cfg,
            checksum: lm.checksum().into(),
            probe_digest: lm.probe_digest().unwrap(),
            heldout_perplexity: 1.2,
            competence: BTreeMap::new(),
            usable: false,
            epochs: 0,
        };
        (lm, meta)
    }

    #[test]
    fn round_trip_is_exact() {
        let (lm, meta) = lm();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.fixture");
        lm.save(&path, &meta).unwrap();
        let (back, meta2) = FrozenLM::load(&path).unwrap();
        assert!(back.params().same_values(lm.params()));
        assert_eq!(back.checksum(), lm.checksum());
        assert_eq!(meta2, meta);
        let (again, _) = FrozenLM::load(&path).unwrap();
        assert_eq!(again.checksum(), back.checksum());
        assert!(matches!(FrozenLM::load_usable(&path), Err(Error::FixtureUnusable(_))));
    }

    #[test]
    fn corruption_is_rejected() {
        let (lm, _) = lm();
        let mut bytes = lm.to_bytes();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        assert!(matches!(FrozenLM::from_bytes(&bytes), Err(Error::Integrity(_))));
        let good = lm.to_bytes();
        assert!(FrozenLM::from_bytes(&good[..good.len() - 8]).is_err());
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(FrozenLM::from_bytes(&magic).is_err());
    }
}
