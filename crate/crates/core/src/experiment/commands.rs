use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, ModelKind};
use super::config::{ExperimentConfig, SystemKind};
use super::gradcheck::{gradcheck_suite, GradCase};
use super::table::Table;
use crate::baselines::{cascade_infer, oracle_infer, train_ctc, train_ctc_from, CtcModel, EncoderLlm};
use crate::diffmath::{Adam, ParamSet};
use crate::error::{Error, Result};
use crate::metrics::{token_accuracy, Scores};
use crate::seeds;
use crate::synthdata::{load_dataset, save_dataset, DataConfig, Record, Split, TaskDataset, World};
use crate::toyllm::{pretrain_fixture, FixtureMeta, FrozenLM, PromptTemplate, Task, Vocabulary, VOCAB_SIZE};
use crate::training::{run_training, run_training_from, EpochRecord, PromptSystem, Regime, TrainConfig, TrainOutcome, Wav2Prompt};

/// Progress sink for long-running commands.
pub type Progress<'a> = &'a mut dyn FnMut(&str);

const WORLD_FILE: &str = "world.json";
const COMPETENCE_FILE: &str = "competence.json";
const LM_FILE: &str = "lm.bin";
const DATA_DIR: &str = "data";

/// Identity of a fixture directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct WorldStamp {
    fixture_seed: u64,
    data: DataConfig,
    lm_checksum: String,
}

/// Text-path measurements taken when fixtures are built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompetenceReport {
    pub lm_checksum: String,
    pub heldout_perplexity: f64,
    /// Exact-match rate per task on held-out instruction lines.
    pub heldout_competence: BTreeMap<String, f64>,
    /// Oracle exact match (percent) per task on the speech test split.
    pub oracle_test_exact_match: BTreeMap<String, f64>,
    pub usable: bool,
}

/// Loaded LM fixture.
pub struct Fixtures {
    pub dir: PathBuf,
    pub seed: u64,
    pub lm: FrozenLM,
    pub meta: FixtureMeta,
}

impl Fixtures {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = cfg.fixtures.clone();
        let stamp_path = dir.join(WORLD_FILE);
        let text = fs::read_to_string(&stamp_path).map_err(|e| Error::io(&stamp_path, e))?;
        let stamp: WorldStamp = serde_json::from_str(&text).map_err(|e| Error::format(&stamp_path, e.to_string()))?;
        if stamp.fixture_seed != cfg.fixture_seed || stamp.data != cfg.data {
            return Err(Error::Integrity(format!(
                "fixtures in {} were built for a different seed or data configuration; rerun `fixtures`",
                dir.display()
            )));
        }
        let (lm, meta) = FrozenLM::load_usable(&dir.join(LM_FILE))?;
        if stamp.lm_checksum != lm.checksum() {
            return Err(Error::Integrity(format!("{} does not match the LM fixture", stamp_path.display())));
        }
        Ok(Self { dir, seed: cfg.fixture_seed, lm, meta })
    }

    pub fn dataset(&self, task: Task) -> Result<TaskDataset> {
        load_dataset(&self.dir.join(DATA_DIR), task, self.seed).map_err(|e| match e {
                Error::Io { path, source } => Error::Integrity(format!("missing dataset file {}: {source}", path.display())),
                e => e,
            })
    }
}

/// True when `cfg.fixtures` holds usable fixtures matching `cfg`.
pub fn fixtures_ready(cfg: &ExperimentConfig) -> bool {
    Fixtures::load(cfg).is_ok()
}

/// Builds the synthetic datasets and the frozen LM, then measures text-path
/// competence. Fails with [`Error::FixtureUnusable`] when a gate is missed;
/// the fixture is still written, marked unusable.
pub fn cmd_fixtures(cfg: &ExperimentConfig, progress: Progress) -> Result<CompetenceReport> {
    cfg.validate()?;
    let world = World::new(cfg.data.clone(), cfg.fixture_seed)?;
    let dir = &cfg.fixtures;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    progress(&format!("rendering datasets into {}", dir.display()));
    let mut datasets = Vec::new();
    for task in Task::ALL {
        let ds = world.build_task_dataset(task)?;
        save_dataset(&ds, &dir.join(DATA_DIR))?;
        datasets.push(ds);
    }
    let (train, heldout) = world.lm_corpus()?;
    progress(&format!("pretraining the LM on {} instruction lines", train.len()));
    let (lm, mut meta) = pretrain_fixture(&train, &heldout, &cfg.lm, seeds::derive(cfg.fixture_seed, "lm"), |e| {
        progress(&format!("lm epoch {} nll {:.5} held-out perplexity {:.5}", e.epoch, e.train_nll, e.heldout_perplexity))
    })?;
    let mut oracle = BTreeMap::new();
    for ds in &datasets {
        let recs = limit(ds.split(Split::Test), cfg.eval_limit);
        let template = ds.task.template();
        let hyps = recs.iter().map(|r| oracle_infer(&lm, &r.input, &template, &cfg.decode)).collect::<Result<Vec<_>>>()?;
        let s = score(&hyps, recs);
        progress(&format!("oracle {} test exact match {:.2}%", ds.task, s.exact_match));
        oracle.insert(ds.task.name().to_string(), s.exact_match);
    }
    meta.usable = meta.usable && oracle.values().all(|&em| em >= 100.0 * cfg.lm.min_competence);
    lm.save(&dir.join(LM_FILE), &meta)?;
    let stamp = WorldStamp { fixture_seed: cfg.fixture_seed, data: cfg.data.clone(), lm_checksum: lm.checksum().to_string() };
    write_json(&dir.join(WORLD_FILE), &stamp)?;
    let report = CompetenceReport {
        lm_checksum: lm.checksum().to_string(),
        heldout_perplexity: meta.heldout_perplexity,
        heldout_competence: meta.competence.clone(),
        oracle_test_exact_match: oracle,
        usable: meta.usable,
    };
    write_json(&dir.join(COMPETENCE_FILE), &report)?;
    if !report.usable {
        return Err(Error::FixtureUnusable(format!(
            "perplexity {:.4}, held-out competence {:?}, oracle test exact match {:?}",
            report.heldout_perplexity, report.heldout_competence, report.oracle_test_exact_match
        )));
    }
    Ok(report)
}

/// A model ready for inference.
pub enum LoadedSystem {
    Oracle,
    Cascade { model: CtcModel, params: ParamSet },
    Prompt { system: PromptSystem, params: ParamSet },
}

fn rng_for(cfg: &ExperimentConfig, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, label))
}

/// Fresh recogniser with seeded initialisation.
pub fn build_ctc(cfg: &ExperimentConfig) -> Result<(CtcModel, ParamSet)> {
    let mut p = ParamSet::new();
    let m = CtcModel::register(&mut p, cfg.encoder.clone(), VOCAB_SIZE, &mut rng_for(cfg, "init-ctc"))?;
    Ok((m, p))
}

/// Fresh prompt system of `kind` with seeded initialisation.
pub fn build_prompt_system(cfg: &ExperimentConfig, kind: ModelKind, d_llm: usize) -> Result<(PromptSystem, ParamSet)> {
    let mut p = ParamSet::new();
    let sys = match kind {
        ModelKind::Wav2prompt => {
            PromptSystem::Wav2Prompt(Wav2Prompt::register(&mut p, cfg.encoder.clone(), d_llm, &mut rng_for(cfg, "init-wav2prompt"))?)
        }
        ModelKind::EncoderLlm => PromptSystem::EncoderLlm(EncoderLlm::register(
            &mut p,
            cfg.encoder.clone(),
            d_llm,
            cfg.stack,
            &mut rng_for(cfg, "init-encoder-llm"),
        )?),
        ModelKind::Ctc => return Err(Error::Config("the recogniser is not a prompt system".into())),
    };
    Ok((sys, p))
}

fn model_kind(system: SystemKind) -> Option<ModelKind> {
    match system {
        SystemKind::Wav2prompt => Some(ModelKind::Wav2prompt),
        SystemKind::EncoderLlm | SystemKind::FlatStartEncoderLlm => Some(ModelKind::EncoderLlm),
        SystemKind::Cascade => Some(ModelKind::Ctc),
        SystemKind::Oracle => None,
    }
}

/// Loads `path` as the model `cfg.system` expects.
pub fn load_system(cfg: &ExperimentConfig, lm: &FrozenLM, path: Option<&Path>) -> Result<LoadedSystem> {
    let Some(kind) = model_kind(cfg.system) else {
        return Ok(LoadedSystem::Oracle);
    };
    let path = path.ok_or_else(|| Error::Config(format!("system {} needs a checkpoint", cfg.system)))?;
    let ckpt = Checkpoint::load(path)?;
    ckpt.verify_lm(lm.checksum())?;
    if ckpt.header.model != kind {
        return Err(Error::Integrity(format!("{} holds a {} model, system {} needs {kind}", path.display(), ckpt.header.model, cfg.system)));
    }
    // Architecture comes from the checkpoint's own configuration.
    let arch = &ckpt.header.config;
    Ok(match kind {
        ModelKind::Ctc => {
            let (model, mut params) = build_ctc(arch)?;
            ckpt.restore_into(&mut params)?;
            LoadedSystem::Cascade { model, params }
        }
        _ => {
            let (system, mut params) = build_prompt_system(arch, kind, lm.d_model())?;
            ckpt.restore_into(&mut params)?;
            LoadedSystem::Prompt { system, params }
        }
    })
}

fn limit(records: &[Record], cap: Option<usize>) -> &[Record] {
    &records[..records.len().min(cap.unwrap_or(usize::MAX))]
}

fn score(hyps: &[Vec<usize>], recs: &[Record]) -> Scores {
    Scores::from_pairs(hyps.iter().zip(recs).map(|(h, r)| (h.as_slice(), r.target.as_slice())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serialises");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it).expect("record serialises");
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn prepare_out(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let p = cfg.out.join("config.toml");
    fs::write(&p, cfg.to_toml()).map_err(|e| Error::io(&p, e))
}

/// Splits asr-train into training records and a validation tail.
fn asr_split<'a>(records: &'a [Record], tc: &TrainConfig) -> (&'a [Record], &'a [Record]) {
    let v = tc.val_samples.min(records.len() / 2);
    records.split_at(records.len() - v)
}

/// Result of a training or fine-tuning command.
#[derive(Clone, Debug)]
pub struct TrainReport {
    /// Absent for the oracle.
    pub checkpoint: Option<PathBuf>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn save_outcome(
    cfg: &ExperimentConfig,
    lm: &FrozenLM,
    kind: ModelKind,
    out: TrainOutcome,
    ckpt_stem: &str,
    log_stem: &str,
) -> Result<TrainReport> {
    let ckpt_path = cfg.out.join(format!("{ckpt_stem}.ckpt"));
    write_lines(&cfg.out.join(format!("{log_stem}.jsonl")), &out.history)?;
    let ckpt = Checkpoint::new(kind, cfg.clone(), lm.checksum(), out.params, out.optimizer, out.history.clone(), out.best_epoch);
    ckpt.save(&ckpt_path)?;
    Ok(TrainReport { checkpoint: Some(ckpt_path), history: out.history, best_epoch: out.best_epoch })
}

fn train_recogniser(
    cfg: &ExperimentConfig,
    fx: &Fixtures,
    asr: &[Record],
    stems: (&str, &str),
    progress: Progress,
) -> Result<TrainReport> {
    let (model, params) = build_ctc(cfg)?;
    let (train, val) = asr_split(asr, &cfg.ctc);
    progress(&format!("training the recogniser on {} utterances", train.len()));
    let out = train_ctc(&model, params, train, val, &cfg.ctc, &mut |e| progress(&epoch_line("ctc", e)))?;
    save_outcome(cfg, &fx.lm, ModelKind::Ctc, out, stems.0, stems.1)
}

fn epoch_line(stage: &str, e: &EpochRecord) -> String {
    let val = e.val_token_accuracy.map_or(String::new(), |v| format!(" val token accuracy {v:.2}%"));
    format!("{stage} epoch {} loss {:.5} (ce {:.5} mse {:.5} qua {:.5}){val}", e.epoch, e.loss.total, e.loss.ce, e.loss.mse, e.loss.qua)
}

/// The recogniser named by the config, trained into the run directory when
/// absent.
fn recogniser(cfg: &ExperimentConfig, fx: &Fixtures, asr: &[Record], progress: Progress) -> Result<ParamSet> {
    let path = match &cfg.ctc_checkpoint {
        Some(p) => p.clone(),
        None => train_recogniser(cfg, fx, asr, ("ctc", "ctc"), progress)?.checkpoint.expect("recogniser checkpoint"),
    };
    let ckpt = Checkpoint::load(&path)?;
    ckpt.verify_lm(fx.lm.checksum())?;
    if ckpt.header.model != ModelKind::Ctc {
        return Err(Error::Integrity(format!("{} is not a recogniser checkpoint", path.display())));
    }
    Ok(ckpt.params)
}

/// Trains `cfg.system` on transcribe/asr-train and writes `model.ckpt` and
/// `train.jsonl` into the run directory.
pub fn cmd_train(cfg: &ExperimentConfig, progress: Progress) -> Result<TrainReport> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    prepare_out(&cfg)?;
    if cfg.system == SystemKind::Oracle {
        write_lines::<EpochRecord>(&cfg.out.join("train.jsonl"), &[])?;
        return Ok(TrainReport { checkpoint: None, history: Vec::new(), best_epoch: 0 });
    }
    let fx = Fixtures::load(&cfg)?;
    let ds = fx.dataset(Task::Transcribe)?;
    let asr = ds.split(Split::AsrTrain);
    if asr.is_empty() {
        return Err(Error::Empty("asr-train split"));
    }
    if cfg.system == SystemKind::Cascade {
        return train_recogniser(&cfg, &fx, asr, ("model", "train"), progress);
    }
    let kind = model_kind(cfg.system).expect("prompt system");
    let (system, mut params) = build_prompt_system(&cfg, kind, fx.lm.d_model())?;
    if kind == ModelKind::EncoderLlm || cfg.init_from_ctc {
        let ctc = recogniser(&cfg, &fx, asr, progress)?;
        let n = params.load_matching(&ctc);
        progress(&format!("initialised {n} encoder tensors from the recogniser"));
    }
    if cfg.system == SystemKind::FlatStartEncoderLlm {
        let opt = Adam::new(cfg.finetune.optimizer, &params);
        let out = TrainOutcome { params, optimizer: opt, history: Vec::new(), best_epoch: 0 };
        return save_outcome(&cfg, &fx.lm, kind, out, "model", "train");
    }
    let (train, val) = asr_split(asr, &cfg.train);
    progress(&format!("training {} on {} utterances", cfg.system, train.len()));
    let stage = cfg.system.name();
    let out = run_training(&fx.lm, &system, params, train, val, &cfg.train, &mut |e| progress(&epoch_line(stage, e)))?;
    save_outcome(&cfg, &fx.lm, kind, out, "model", "train")
}

/// Fine-tunes the checkpoint at `base` on the few-shot split of `task`,
/// writing `finetune-<task>.ckpt` and `finetune-<task>.jsonl`. The cascade
/// fine-tunes its recogniser on the transcripts of the same utterances.
pub fn cmd_finetune(cfg: &ExperimentConfig, base: &Path, task: Task, progress: Progress) -> Result<TrainReport> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    prepare_out(&cfg)?;
    let stem = format!("finetune-{task}");
    if cfg.system == SystemKind::Oracle {
        write_lines::<EpochRecord>(&cfg.out.join(format!("{stem}.jsonl")), &[])?;
        return Ok(TrainReport { checkpoint: None, history: Vec::new(), best_epoch: 0 });
    }
    let fx = Fixtures::load(&cfg)?;
    let ds = fx.dataset(task)?;
    let pairs = ds.split(Split::FewShot);
    if pairs.is_empty() {
        return Err(Error::Empty("few-shot split"));
    }
    let mut tc = cfg.finetune.clone();
    tc.regime = Regime::FewShotFinetune;
    progress(&format!("fine-tuning {} on {} {task} pairs", cfg.system, pairs.len()));
    // Fine-tuning continues from the saved optimizer moments. Validation runs
    // on the fine-tuning pairs themselves; there is no other labelled data.
    let resume = Checkpoint::load(base)?.optimizer;
    match load_system(&cfg, &fx.lm, Some(base))? {
        LoadedSystem::Oracle => unreachable!("handled above"),
        LoadedSystem::Cascade { model, params } => {
            let asr: Vec<Record> = pairs.iter().map(|r| Record { target: r.input.clone(), ..r.clone() }).collect();
            let out = train_ctc_from(&model, params, Some(resume), &asr, &asr, &tc, &mut |e| progress(&epoch_line("ctc finetune", e)))?;
            save_outcome(&cfg, &fx.lm, ModelKind::Ctc, out, &stem, &stem)
        }
        LoadedSystem::Prompt { system, params } => {
            let kind = model_kind(cfg.system).expect("prompt system");
            let out =
                run_training_from(&fx.lm, &system, params, Some(resume), pairs, pairs, &tc, &mut |e| progress(&epoch_line("finetune", e)))?;
            save_outcome(&cfg, &fx.lm, kind, out, &stem, &stem)
        }
    }
}

/// One scored utterance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalLine {
    pub id: String,
    pub output: String,
    pub target: String,
    pub exact: bool,
    pub token_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub system: SystemKind,
    pub task: Task,
    pub split: Split,
    /// Parameter checksum of the evaluated checkpoint.
    pub checkpoint: Option<String>,
    pub scores: Scores,
}

/// Scores `cfg.system` on `task`/`split` with raw firing weights and the
/// task's template, writing per-record lines and the summary to
/// `eval-<label>-<task>-<split>.jsonl`. Never writes parameters.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: Option<&Path>, task: Task, split: Split) -> Result<EvalSummary> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let fx = Fixtures::load(&cfg)?;
    let ds = fx.dataset(task)?;
    let recs = limit(ds.split(split), cfg.eval_limit);
    if recs.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let loaded = load_system(&cfg, &fx.lm, checkpoint)?;
    let template = PromptTemplate::from_id(task.template().id)?;
    let hyps = recs
        .iter()
        .map(|r| match &loaded {
            LoadedSystem::Oracle => oracle_infer(&fx.lm, &r.input, &template, &cfg.decode),
            LoadedSystem::Cascade { model, params } => cascade_infer(model, params, &fx.lm, &r.frames, &template, &cfg.decode),
            LoadedSystem::Prompt { system, params } => {
                system.infer(params, &fx.lm, &r.frames, &template, &cfg.decode, cfg.train.threshold, cfg.train.tail)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = score(&hyps, recs);
    let checksum = match &loaded {
        LoadedSystem::Oracle => None,
        LoadedSystem::Cascade { params, .. } | LoadedSystem::Prompt { params, .. } => Some(params.checksum()),
    };
    let summary = EvalSummary { system: cfg.system, task, split, checkpoint: checksum, scores };
    let vocab = Vocabulary::standard();
    let mut buf = Vec::new();
    for (h, r) in hyps.iter().zip(recs) {
        let line = EvalLine {
            id: r.id.clone(),
            output: vocab.decode(h)?,
            target: vocab.decode(&r.target)?,
            exact: h == &r.target,
            token_accuracy: token_accuracy(h, &r.target),
        };
        serde_json::to_writer(&mut buf, &line).expect("line serialises");
        buf.push(b'\n');
    }
    serde_json::to_writer(&mut buf, &summary).expect("summary serialises");
    buf.push(b'\n');
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let label = checkpoint.and_then(|p| p.file_stem()).map_or_else(|| cfg.system.name().to_string(), |s| s.to_string_lossy().into_owned());
    let path = cfg.out.join(format!("eval-{label}-{task}-{split}.jsonl"));
    fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Runs the tiny-instance gradient checks and writes `gradcheck.json`.
pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<Vec<GradCase>> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let cases = gradcheck_suite(cfg.seed)?;
    write_json(&cfg.out.join("gradcheck.json"), &cases)?;
    Ok(cases)
}

/// Trains Wav2Prompt with the configured γ and with γ = 0 on identical
/// seeds, then compares zero-shot exact match on `cfg.tasks`. Writes
/// `ablate.txt` and `ablate.json`.
pub fn cmd_ablate(cfg: &ExperimentConfig, progress: Progress) -> Result<Table> {
    let mut base = cfg.resolved();
    base.system = SystemKind::Wav2prompt;
    base.validate()?;
    prepare_out(&base)?;
    if base.init_from_ctc && base.ctc_checkpoint.is_none() {
        let fx = Fixtures::load(&base)?;
        let ds = fx.dataset(Task::Transcribe)?;
        let r = train_recogniser(&base, &fx, ds.split(Split::AsrTrain), ("ctc", "ctc"), progress)?;
        base.ctc_checkpoint = r.checkpoint;
    }
    let gammas = [base.train.gamma, 0.0];
    let mut table = Table::new("zero-shot exact match (%)", base.tasks.iter().map(|t| t.name().to_string()).collect());
    for gamma in gammas {
        let mut run = base.clone();
        run.train.gamma = gamma;
        run.out = base.out.join(format!("gamma-{gamma}"));
        progress(&format!("ablation run with gamma {gamma}"));
        let r = cmd_train(&run, progress)?;
        let ckpt = r.checkpoint.expect("wav2prompt checkpoint");
        let mut row = Vec::new();
        for &task in &base.tasks {
            let s = cmd_eval(&run, Some(&ckpt), task, Split::Test)?;
            progress(&format!("gamma {gamma} {task}: exact match {:.2}%", s.scores.exact_match));
            row.push(s.scores.exact_match);
        }
        table.push(format!("wav2prompt gamma={gamma}"), row);
    }
    table.meta.insert("seed".into(), base.seed.to_string());
    table.meta.insert("fixture_seed".into(), base.fixture_seed.to_string());
    table.meta.insert("split".into(), Split::Test.name().into());
    table.write(&base.out, "ablate")?;
    Ok(table)
}
