//! `adapterfuse` command-line harness.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use adapterfuse::config::RunConfig;
use adapterfuse::data::{synth_corpus, SynthOptions};
use adapterfuse::diagnostics::{fused_gradient_check, op_gradient_suite, transformer_gradient_check};
use adapterfuse::experts::ExpertConfig;
use adapterfuse::metrics::{
    final_score, load_predictions, parse_component_table, render_table, save_predictions, Judge, RemoteJudge,
    TokenF1Judge,
};
use adapterfuse::pipeline::{evaluate_predictions, generate_predictions, train_stage, InitSource};
use adapterfuse::Error;

const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "adapterfuse", version, about = "Expert-fused adapter language model harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage (0 = base pretraining, 1 = adapters, 2 = decoder biases).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(0..=2))]
        stage: u8,
    },
    /// Greedy-decode an answer for every record of a dataset.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions file and write a key=value report.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = JudgeKind::Stub)]
        judge: JudgeKind,
    },
    /// Final score of every row of a tab-separated component table.
    Score {
        #[arg(long)]
        components: PathBuf,
    },
    /// Finite-difference gradient checks of every op and of whole models.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
    /// Write a synthetic coordinate-question corpus.
    Synth {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = ExpertConfig::default().n_det)]
        n_det: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum JudgeKind {
    /// Token-overlap F1 scaled to 0..100.
    Stub,
    /// Chat-completions endpoint configured through the environment.
    Remote,
}

enum Failure {
    /// Subcommand name and message.
    Usage(&'static str, String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

fn usage(command: &'static str, msg: String) -> Failure {
    Failure::Usage(command, msg)
}

fn train(config: &Path, stage: u8) -> Result<(), Failure> {
    if !config.is_file() {
        return Err(usage("train", format!("config file {} does not exist", config.display())));
    }
    let cfg = RunConfig::load(config)?;
    let out = train_stage(&cfg, stage)?;
    match &out.init {
        InitSource::PreviousStage(p) | InitSource::Checkpoint(p) => eprintln!("initialised from {}", p.display()),
        InitSource::Fresh => eprintln!("initialised fresh model"),
    }
    let losses = out.log.losses();
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        println!("stage {stage}: {} steps, loss {first:.6} -> {last:.6}", losses.len());
    }
    println!("wrote {}", out.checkpoint_path.display());
    Ok(())
}

fn eval(pred: &Path, out: &Path, judge: JudgeKind) -> Result<(), Failure> {
    let pairs = load_predictions(pred)?;
    let judge: Box<dyn Judge> = match judge {
        JudgeKind::Stub => Box::new(TokenF1Judge),
        JudgeKind::Remote => Box::new(RemoteJudge::from_env().map_err(|e| usage("eval", e.to_string()))?),
    };
    let report = evaluate_predictions(&pairs, judge.as_ref())?;
    std::fs::write(out, report.to_key_values()).map_err(|e| Failure::Data(Error::Io {
        path: out.to_path_buf(),
        source: e,
    }))?;
    let name = pred.file_stem().and_then(|s| s.to_str()).unwrap_or("predictions");
    print!("{}", render_table(&[(name, report)]));
    Ok(())
}

fn score(components: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(components).map_err(|e| Failure::Data(Error::Io {
        path: components.to_path_buf(),
        source: e,
    }))?;
    for row in parse_component_table(&text)? {
        println!("{}\t{:.4}", row.name, final_score(&row.components)?);
    }
    Ok(())
}

fn gradcheck(seed: u64, trials: usize) -> Result<(), Failure> {
    let mut worst = 0f64;
    let mut report = |name: &str, err: f64| {
        worst = worst.max(err);
        let verdict = if err < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        println!("{name:<24}{err:>12.3e}  {verdict}");
    };
    for c in op_gradient_suite(seed, trials)? {
        report(&format!("{} x{}", c.op, c.trials), c.max_relative_error);
    }
    report("transformer", transformer_gradient_check(seed)?.max_relative_error);
    let fused = fused_gradient_check(seed, 16, 8, 2)?;
    report(&format!("fused ({} coords)", fused.coordinates), fused.max_relative_error);
    if worst < GRADCHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Data(Error::Evaluation(format!(
            "max relative error {worst:.3e} exceeds {GRADCHECK_TOLERANCE:e}"
        ))))
    }
}

fn synth(seed: u64, size: usize, out: &Path, n_det: usize) -> Result<(), Failure> {
    let opts = SynthOptions {
        experts: ExpertConfig {
            n_det,
            ..ExpertConfig::default()
        },
        ..SynthOptions::default()
    };
    let corpus = synth_corpus(seed, size, out, &opts)?;
    println!("wrote {} records to {}", corpus.pairs.len(), corpus.dataset_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, stage } => train(&config, stage),
        Command::Generate { ckpt, dataset, out } => {
            let preds = generate_predictions(&ckpt, &dataset)?;
            save_predictions(&out, &preds)?;
            println!("wrote {} predictions to {}", preds.len(), out.display());
            Ok(())
        }
        Command::Eval { pred, out, judge } => eval(&pred, &out, judge),
        Command::Score { components } => score(&components),
        Command::Gradcheck { seed, trials } => gradcheck(seed, trials),
        Command::Synth { seed, size, out, n_det } => synth(seed, size, &out, n_det),
    }
}

/// Usage line of `command`, or of the whole program when it is not a known
/// subcommand.
fn usage_for(command: Option<&str>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match command.and_then(|c| cmd.find_subcommand_mut(c)) {
        Some(sub) => sub.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprint!("{msg}");
            if !msg.contains("Usage:") {
                eprintln!("\n{}", usage_for(std::env::args().nth(1).as_deref()));
            }
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(command, msg)) => {
            eprintln!("error: {msg}\n");
            eprintln!("{}", usage_for(Some(command)));
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
