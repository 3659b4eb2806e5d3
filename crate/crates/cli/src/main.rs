//! `fidqa`: command-line driver for the retrieval and answer-generation
//! pipeline. Every subcommand reads one TOML config; `FIDQA__SECTION__KEY`
//! environment variables and `--set section.key=value` flags override it.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use fidqa::config::PipelineConfig;
use fidqa::pipeline;
use fidqa::synth::{self, SynthConfig};

#[derive(Parser)]
#[command(
    name = "fidqa",
    version,
    about = "Retrieval-augmented generative question answering"
)]
struct Cli {
    /// Pipeline config file (TOML). Relative paths inside it resolve against its directory.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Overrides the root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides one config key, e.g. `--set retrieval.k=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// Logs at debug level.
    #[arg(long, short, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the passage and QA files and persist the corpus store.
    Ingest,
    /// Encode passages and build the configured index.
    BuildIndex,
    /// Retrieve the top-k passages for every question.
    Retrieve,
    /// Train the reader on the training split.
    Train,
    /// Generate answers for the evaluation questions.
    Answer,
    /// Score predictions and retrieval, write report.json.
    Evaluate,
    /// Run every step in order.
    Run,
    /// Print the resolved configuration.
    ShowConfig,
    /// Write a synthetic knowledge base, question splits and a matching config.
    Synth(SynthArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long, default_value = "synth")]
    out: PathBuf,
    /// Total passages; those beyond `--entities` are event passages.
    #[arg(long, default_value_t = SynthConfig::default().passages)]
    passages: usize,
    #[arg(long, default_value_t = SynthConfig::default().entities)]
    entities: usize,
    #[arg(long, default_value_t = SynthConfig::default().questions)]
    questions: usize,
    /// Questions in the training split; the rest are held out.
    #[arg(long, default_value_t = SynthConfig::default().train)]
    train: usize,
    /// Entities named in each event passage.
    #[arg(long, default_value_t = SynthConfig::default().mentions)]
    mentions: usize,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = PipelineConfig::load(cli.config.as_deref(), std::env::vars(), &overrides)?;
    Ok(cfg)
}

/// Records the resolved config next to the artifacts it produced.
fn record_config(cfg: &PipelineConfig) -> Result<()> {
    let dir = &cfg.paths.output;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
}

fn step(name: &str, cfg: &PipelineConfig) -> Result<()> {
    let start = Instant::now();
    let line = match name {
        "ingest" => pipeline::cmd_ingest(cfg)?.to_string(),
        "build-index" => {
            let summary = pipeline::cmd_build_index(cfg)?;
            format!("{summary} in {:.2?}", start.elapsed())
        }
        "retrieve" => pipeline::cmd_retrieve(cfg)?.to_string(),
        "train" => pipeline::cmd_train(cfg)?.to_string(),
        "answer" => pipeline::cmd_answer(cfg)?.to_string(),
        "evaluate" => pipeline::cmd_evaluate(cfg)?.summary(),
        _ => unreachable!("unknown step {name}"),
    };
    if line.contains('\n') {
        print!("{name}:\n{line}");
    } else {
        println!("{name}: {line}");
    }
    info!("{name} took {:.2?}", start.elapsed());
    Ok(())
}

fn synth(args: &SynthArgs, seed: u64) -> Result<()> {
    let cfg = SynthConfig {
        passages: args.passages,
        entities: args.entities,
        questions: args.questions,
        train: args.train,
        mentions: args.mentions,
        seed,
    };
    let data = synth::generate(&cfg)?;
    data.write(&args.out)?;
    let config_path = args.out.join("fidqa.toml");
    std::fs::write(&config_path, synth::pipeline_config(seed).to_toml())
        .with_context(|| format!("writing {}", config_path.display()))?;
    println!(
        "wrote {} passages, {} training and {} test questions to {}",
        data.passages.len(),
        data.train.len(),
        data.test.len(),
        args.out.display()
    );
    println!("next: fidqa --config {} run", config_path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Synth(args) = &cli.command {
        return synth(args, cli.seed.unwrap_or(0));
    }
    let cfg = load_config(cli)?;
    let steps: &[&str] = match cli.command {
        Command::Ingest => &["ingest"],
        Command::BuildIndex => &["build-index"],
        Command::Retrieve => &["retrieve"],
        Command::Train => &["train"],
        Command::Answer => &["answer"],
        Command::Evaluate => &["evaluate"],
        Command::Run => &[
            "ingest",
            "build-index",
            "retrieve",
            "train",
            "answer",
            "evaluate",
        ],
        Command::ShowConfig => {
            print!("{}", cfg.to_toml());
            return Ok(());
        }
        Command::Synth(_) => unreachable!(),
    };
    record_config(&cfg)?;
    for name in steps {
        step(name, &cfg).with_context(|| format!("{name} failed"))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
