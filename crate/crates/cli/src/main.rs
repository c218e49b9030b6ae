use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wav2prompt::experiment::{
    cmd_ablate, cmd_eval, cmd_finetune, cmd_fixtures, cmd_gradcheck, cmd_train, ExperimentConfig, SystemKind, Table,
};
use wav2prompt::synthdata::Split;
use wav2prompt::toyllm::Task;
use wav2prompt::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_INTEGRITY: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser)]
#[command(name = "wav2prompt", version, about = "Speech prompts for a frozen toy LM: fixtures, training, evaluation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the system.
    #[arg(long, global = true)]
    system: Option<SystemKind>,
    /// Restricts evaluation (and the ablation table) to one task.
    #[arg(long, global = true)]
    task: Option<Task>,
    #[arg(long, global = true, default_value = "test")]
    split: Split,
}

#[derive(Subcommand)]
enum Command {
    /// Render the datasets and pretrain the frozen LM.
    Fixtures,
    /// Train the selected system on transcribe/asr-train.
    Train,
    /// Fine-tune a checkpoint on the few-shot split of --task.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score the selected system on --task (or every configured task).
    Eval {
        /// Required for every system except the oracle.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference checks of every trainable objective.
    Gradcheck,
    /// Wav2Prompt with and without the embedding MSE, zero-shot.
    Ablate,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_INTEGRITY,
            })
        }
    }
}

fn config(g: &Global) -> wav2prompt::Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out = o.clone();
    }
    if let Some(s) = g.system {
        cfg.system = s;
    }
    if let Some(t) = g.task {
        cfg.tasks = vec![t];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> wav2prompt::Result<ExitCode> {
    let cfg = match config(&cli.global) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return Ok(ExitCode::from(EXIT_USAGE));
        }
    };
    let mut progress = |msg: &str| eprintln!("{msg}");
    match cli.command {
        Command::Fixtures => {
            let r = cmd_fixtures(&cfg, &mut progress)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serialises"));
        }
        Command::Train => {
            let r = cmd_train(&cfg, &mut progress)?;
            match r.checkpoint {
                Some(p) => println!("checkpoint {} (best epoch {})", p.display(), r.best_epoch),
                None => println!("{} has no trainable parameters", cfg.system),
            }
        }
        Command::Finetune { checkpoint } => {
            let task = cli.global.task.ok_or_else(|| Error::Config("finetune needs --task".into()))?;
            let r = cmd_finetune(&cfg, &checkpoint, task, &mut progress)?;
            if let Some(p) = r.checkpoint {
                println!("checkpoint {}", p.display());
            }
        }
        Command::Eval { checkpoint } => {
            let mut table = Table::new(
                format!("{} on {}", cfg.system, cli.global.split),
                vec!["exact match %".into(), "token accuracy %".into(), "edit distance".into()],
            );
            for &task in &cfg.tasks {
                let s = cmd_eval(&cfg, checkpoint.as_deref(), task, cli.global.split)?;
                table.push(task.name(), vec![s.scores.exact_match, s.scores.token_accuracy, s.scores.edit_distance]);
            }
            table.meta.insert("seed".into(), cfg.seed.to_string());
            table.write(&cfg.out, &format!("eval-{}-{}", cfg.system, cli.global.split))?;
            print!("{}", table.render());
        }
        Command::Gradcheck => {
            let cases = cmd_gradcheck(&cfg)?;
            let mut ok = true;
            for c in &cases {
                println!("{:<28} {:>6} scalars  max relative error {:.3e}  {}", c.name, c.checked, c.max_rel_err, if c.passed { "pass" } else { "FAIL" });
                ok &= c.passed;
            }
            if !ok {
                return Ok(ExitCode::from(EXIT_CHECK));
            }
        }
        Command::Ablate => {
            let t = cmd_ablate(&cfg, &mut progress)?;
            print!("{}", t.render());
        }
    }
    Ok(ExitCode::SUCCESS)
}
