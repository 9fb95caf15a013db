use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use factgcn::answer_model::RelationMode;
use factgcn::pipeline::commands;
use factgcn::pipeline::config::PipelineConfig;
use factgcn::Error;

/// Knowledge-base question answering: retrieval, relation filtering and a
/// graph convolutional answer selector.
#[derive(Parser, Debug)]
#[command(name = "factgcn", version)]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    command: Command,
}

/// Flags mirror keys of the JSON config file and win over it.
#[derive(Args, Debug)]
struct Shared {
    /// JSON config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// `seed`
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `data_dir`
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// `out_dir`
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// `relation_mode`: 1, 3 or gt
    #[arg(long = "relation-topk", global = true)]
    relation_topk: Option<RelationMode>,
    /// `retrieval.top_n`
    #[arg(long, global = true)]
    top_n: Option<usize>,
    /// `retrieval.top_k_percent`
    #[arg(long, global = true, value_parser = clap::value_parser!(u32).range(1..=100))]
    top_k_percent: Option<u32>,
    /// `retrieval.score_relation_words`: on or off
    #[arg(long, global = true, value_parser = on_off)]
    score_relation_words: Option<bool>,
    /// `relation_train.epochs`
    #[arg(long, global = true)]
    relation_epochs: Option<usize>,
    /// `answer_train.epochs`
    #[arg(long, global = true)]
    answer_epochs: Option<usize>,
    /// `answer_model.ablate_vc`
    #[arg(long, global = true)]
    ablate_vc: bool,
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset into the data directory.
    GenSynthetic,
    /// Train the relation classifier on the training split.
    TrainRelation,
    /// Train the answer model; needs the relation checkpoint.
    TrainAnswer,
    /// Evaluate on the test split and write the metrics file.
    Eval,
    /// Answer one question.
    Ask {
        question: String,
        /// Visual concepts, comma separated.
        #[arg(long, value_delimiter = ',')]
        concepts: Vec<String>,
    },
    /// Finite-difference gradient check of both models.
    Gradcheck,
    /// Summarize a checkpoint file.
    InspectCheckpoint { path: PathBuf },
    /// Print the resolved configuration.
    ShowConfig,
}

fn on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        _ => Err(format!("expected on or off, got {s:?}")),
    }
}

fn resolve(shared: &Shared) -> Result<PipelineConfig, Error> {
    let mut c = match &shared.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = shared.seed {
        c.seed = v;
    }
    if let Some(v) = &shared.data_dir {
        c.data_dir = v.clone();
    }
    if let Some(v) = &shared.out_dir {
        c.out_dir = v.clone();
    }
    if let Some(v) = shared.relation_topk {
        c.relation_mode = v;
    }
    if let Some(v) = shared.top_n {
        c.retrieval.top_n = v;
    }
    if let Some(v) = shared.top_k_percent {
        c.retrieval.top_k_percent = v;
    }
    if let Some(v) = shared.score_relation_words {
        c.retrieval.score_relation_words = v;
    }
    if let Some(v) = shared.relation_epochs {
        c.relation_train.epochs = v;
    }
    if let Some(v) = shared.answer_epochs {
        c.answer_train.epochs = v;
    }
    if shared.ablate_vc {
        c.answer_model.ablate_vc = true;
    }
    Ok(c)
}

fn print(value: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&value).expect("json"));
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let config = resolve(&cli.shared)?;
    match cli.command {
        Command::GenSynthetic => {
            let (_, summary) = commands::gen_synthetic(&config)?;
            print(json!(summary));
        }
        Command::TrainRelation => print(json!(commands::run_train_relation(&config)?)),
        Command::TrainAnswer => print(json!(commands::run_train_answer(&config)?)),
        Command::Eval => {
            let m = commands::run_eval(&config)?;
            print(json!({
                "metrics": config.out_path(&config.outputs.metrics),
                "total": m.total,
                "top1": m.top1,
                "top3": m.top3,
                "errors": m.errors,
            }));
        }
        Command::Ask { question, concepts } => {
            print(json!(commands::run_ask(&config, &question, &concepts)?));
        }
        Command::Gradcheck => {
            let report = commands::run_gradcheck(&config)?;
            let passed = report.passed();
            print(json!(report));
            if !passed {
                let e = Error::GradCheck {
                    max_rel_error: report.max_rel_error,
                    threshold: report.threshold,
                };
                eprintln!("error: {e}");
                return Ok(ExitCode::from(e.exit_code()));
            }
        }
        Command::InspectCheckpoint { path } => print(json!(commands::inspect_checkpoint(path)?)),
        Command::ShowConfig => println!("{}", config.to_json()),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.shared.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
