use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::grammar::{gen_instruction_corpus, Grammar, GrammarConfig};
use super::speech::{PseudoSpeechSpec, SpeechConfig};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seeds;
use crate::toyllm::{Task, TextExample, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub grammar: GrammarConfig,
    pub speech: SpeechConfig,
    /// Sentences whose instruction lines pretrain the LM.
    pub lm_sentences: usize,
    /// Sentences held out to measure LM perplexity and competence.
    pub lm_heldout: usize,
    pub asr_train: usize,
    pub few_shot: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            grammar: GrammarConfig::default(),
            speech: SpeechConfig::default(),
            lm_sentences: 6000,
            lm_heldout: 400,
            asr_train: 8000,
            few_shot: 200,
            test: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    AsrTrain,
    FewShot,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::AsrTrain, Split::FewShot, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::AsrTrain => "asr-train",
            Split::FewShot => "few-shot",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?} (expected asr-train, few-shot or test)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: String,
    pub task: Task,
    /// Payload tokens (the spoken sentence).
    pub input: Vec<usize>,
    pub target: Vec<usize>,
    pub template: u8,
    pub frames: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task: Task,
    pub seed: u64,
    pub splits: BTreeMap<Split, Vec<Record>>,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> &[Record] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    /// Fails when a sentence appears in more than one split.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut owner: BTreeMap<&[usize], Split> = BTreeMap::new();
        for (&split, recs) in &self.splits {
            for r in recs {
                if let Some(prev) = owner.insert(&r.input, split) {
                    if prev != split {
                        let text = Vocabulary::standard().decode(&r.input)?;
                        return Err(Error::SplitLeak(format!("{text:?} appears in {prev} and {split}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Seeded grammar, codebook and sentence partition shared by every task.
#[derive(Clone, Debug)]
pub struct World {
    pub cfg: DataConfig,
    pub seed: u64,
    pub grammar: Grammar,
    pub speech: PseudoSpeechSpec,
    lm_train: Vec<String>,
    lm_heldout: Vec<String>,
    splits: BTreeMap<Split, Vec<String>>,
}

impl World {
    pub fn new(cfg: DataConfig, seed: u64) -> Result<Self> {
        let grammar = Grammar::new(cfg.grammar.clone(), seeds::derive(seed, "grammar"))?;
        let speech = PseudoSpeechSpec::new(cfg.speech.clone(), seeds::derive(seed, "codebook"))?;
        let sizes = [cfg.lm_sentences, cfg.lm_heldout, cfg.asr_train, cfg.few_shot, cfg.test];
        let pool = grammar.corpus(seeds::derive(seed, "sentences"), sizes.iter().sum(), &HashSet::new());
        let mut parts = Vec::new();
        let mut at = 0;
        for n in sizes {
            parts.push(pool[at..at + n].to_vec());
            at += n;
        }
        let mut it = parts.into_iter();
        let lm_train = it.next().expect("five parts");
        let lm_heldout = it.next().expect("five parts");
        let splits = Split::ALL.into_iter().zip(it).collect();
        Ok(Self { cfg, seed, grammar, speech, lm_train, lm_heldout, splits })
    }

    pub fn sentences(&self, split: Split) -> &[String] {
        &self.splits[&split]
    }

    /// Instruction lines for LM pretraining and for held-out measurement.
    pub fn lm_corpus(&self) -> Result<(Vec<TextExample>, Vec<TextExample>)> {
        Ok((gen_instruction_corpus(&self.grammar, &self.lm_train)?, gen_instruction_corpus(&self.grammar, &self.lm_heldout)?))
    }

    /// Text lines of `task` over a speech split, for Oracle-LLM checks.
    pub fn text_lines(&self, task: Task, split: Split) -> Result<Vec<TextExample>> {
        let vocab = Vocabulary::standard();
        self.sentences(split)
            .iter()
            .map(|s| Ok(TextExample { task, payload: vocab.encode_text(s)?, response: self.grammar.answer(task, s)? }))
            .collect()
    }

    /// Speech records for `task`. Only transcribe has an asr-train split.
    /// A sentence's frames depend on its split and position only, so every
    /// task hears the same audio for the same sentence.
    pub fn build_task_dataset(&self, task: Task) -> Result<TaskDataset> {
        let vocab = Vocabulary::standard();
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            if split == Split::AsrTrain && task != Task::Transcribe {
                splits.insert(split, Vec::new());
                continue;
            }
            let recs = self
                .sentences(split)
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let input = vocab.encode_text(s)?;
                    let frames = self.speech.render(&input, seeds::derive_indexed(self.seed, split.name(), i as u64))?;
                    Ok(Record {
                        id: format!("{}-{}-{i:05}", task.name(), split.name()),
                        task,
                        target: self.grammar.answer(task, s)?,
                        template: task.template().id,
                        input,
                        frames,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            splits.insert(split, recs);
        }
        let ds = TaskDataset { task, seed: self.seed, splits };
        ds.check_disjoint()?;
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    task: Task,
    split: Split,
    tokens: Vec<usize>,
    target: Vec<usize>,
    template: u8,
    offset: u64,
}

fn manifest_path(dir: &Path, task: Task) -> std::path::PathBuf {
    dir.join(format!("{}.manifest.jsonl", task.name()))
}

fn blob_path(dir: &Path, task: Task) -> std::path::PathBuf {
    dir.join(format!("{}.frames.bin", task.name()))
}

/// Writes `<task>.manifest.jsonl` (one record per line) and
/// `<task>.frames.bin` (per record: rows and cols as u64, then the frames
/// as f64, all little-endian).
pub fn save_dataset(ds: &TaskDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::new();
    let mut blob = Vec::new();
    for (&split, recs) in &ds.splits {
        for r in recs {
            let line = ManifestLine {
                id: r.id.clone(),
                task: r.task,
                split,
                tokens: r.input.clone(),
                target: r.target.clone(),
                template: r.template,
                offset: blob.len() as u64,
            };
            serde_json::to_writer(&mut manifest, &line).expect("manifest line serialises");
            manifest.push(b'\n');
            blob.extend_from_slice(&(r.frames.rows() as u64).to_le_bytes());
            blob.extend_from_slice(&(r.frames.cols() as u64).to_le_bytes());
            for v in r.frames.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mp = manifest_path(dir, ds.task);
    fs::File::create(&mp).and_then(|mut f| f.write_all(&manifest)).map_err(|e| Error::io(&mp, e))?;
    let bp = blob_path(dir, ds.task);
    fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))
}

pub fn load_dataset(dir: &Path, task: Task, seed: u64) -> Result<TaskDataset> {
    let mp = manifest_path(dir, task);
    let bp = blob_path(dir, task);
    let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
    let file = fs::File::open(&mp).map_err(|e| Error::io(&mp, e))?;
    let mut splits: BTreeMap<Split, Vec<Record>> = Split::ALL.into_iter().map(|s| (s, Vec::new())).collect();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&mp, e))?;
        let m: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::format(&mp, format!("line {}: {e}", n + 1)))?;
        let at = m.offset as usize;
        let header = blob.get(at..at + 16).ok_or_else(|| Error::format(&bp, format!("offset {at} out of range")))?;
        let rows = u64::from_le_bytes(header[..8].try_into().expect("8 bytes")) as usize;
        let cols = u64::from_le_bytes(header[8..].try_into().expect("8 bytes")) as usize;
        let body = blob
            .get(at + 16..at + 16 + rows * cols * 8)
            .ok_or_else(|| Error::format(&bp, format!("record {} truncated", m.id)))?;
        let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        splits.entry(m.split).or_default().push(Record {
            id: m.id,
            task: m.task,
            input: m.tokens,
            target: m.target,
            template: m.template,
            frames: Matrix::from_vec(rows, cols, data)?,
        });
    }
    let ds = TaskDataset { task, seed, splits };
    ds.check_disjoint()?;
    Ok(ds)
}
