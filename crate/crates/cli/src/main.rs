use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ocmrc::config::{PipelineConfig, RetrieverKind, RunMode};
use ocmrc::pipeline;
use ocmrc::train::Ablation;
use ocmrc::Result;

#[derive(Parser)]
#[command(name = "ocmrc", version, about = "One-stage open-retrieval conversational machine reading")]
struct Cli {
    /// TOML configuration layered over the mode preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for ingest, synth and build-index; run directory otherwise.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Cumulative ablation: s, s+a, s+a+i or s+a+i+f.
    #[arg(long, global = true)]
    ablate: Option<String>,
    #[arg(long, global = true, value_parser = ["desk", "full"])]
    mode: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and segment a corpus, writing normalized copies and labels.
    Ingest {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// Generate a synthetic benchmark.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Build a retriever index for a knowledge base.
    BuildIndex {
        #[arg(long)]
        kb: Option<PathBuf>,
        #[arg(long = "type", value_parser = ["tfidf", "dense"])]
        kind: Option<String>,
    },
    /// Train the configured retriever into the run directory.
    TrainRetriever,
    /// Rank rules for every utterance of every split.
    Retrieve {
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Train the reader.
    TrainReader,
    /// Evaluate a reader checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Print a comparison table of evaluation reports or run directories.
    Report { inputs: Vec<PathBuf> },
}

fn config(cli: &Cli) -> Result<PipelineConfig> {
    let mode = cli.mode.as_deref().map(str::parse::<RunMode>).transpose()?;
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p, mode)?,
        None => PipelineConfig::preset(mode.unwrap_or(RunMode::Desk)),
    };
    cfg.apply_env();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(a) = &cli.ablate {
        cfg.training.ablation = Ablation::parse(a)?;
    }
    if let Some(out) = &cli.out {
        cfg.run_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required_out(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().ok_or_else(|| ocmrc::Error::Config("this command needs --out".into()))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest { kb, train, dev, test } => {
            let mut cfg = config(cli)?;
            cfg.corpus.kb = kb.clone();
            cfg.corpus.train = train.clone();
            cfg.corpus.dev = dev.clone();
            cfg.corpus.test = test.clone();
            let out = required_out(cli)?;
            pipeline::ingest_command(&cfg, out)?;
            println!("ingested corpus into {}", out.display());
        }
        Command::Synth { spec } => {
            let out = required_out(cli)?;
            pipeline::synth_command(spec.as_deref(), out)?;
            println!("wrote synthetic benchmark to {}", out.display());
        }
        Command::BuildIndex { kb, kind } => {
            let mut cfg = config(cli)?;
            if let Some(kb) = kb {
                cfg.corpus.kb = kb.clone();
            }
            if let Some(k) = kind {
                cfg.retriever.kind = k.parse::<RetrieverKind>()?;
            }
            let out = required_out(cli)?;
            let data = pipeline::load_data(&cfg)?;
            let path = pipeline::build_index(&cfg, &data, out)?;
            println!("{}", path.display());
        }
        Command::TrainRetriever => {
            let path = pipeline::train_retriever_command(&config(cli)?)?;
            println!("{}", path.display());
        }
        Command::Retrieve { index } => {
            let reports = pipeline::retrieve_command(&config(cli)?, index.as_deref())?;
            for (split, r) in &reports {
                let cells: Vec<String> =
                    r.overall.accuracy.iter().map(|(k, a)| format!("top{k} {a:.1}")).collect();
                println!("{split}: {}", cells.join("  "));
            }
        }
        Command::TrainReader => {
            let (path, id) = pipeline::train_reader_command(&config(cli)?)?;
            println!("{} {id}", path.display());
        }
        Command::Evaluate { checkpoint, split } => {
            let cfg = config(cli)?;
            let (path, report) = pipeline::evaluate_command(&cfg, checkpoint, pipeline::parse_split_name(split)?)?;
            print!("{}", ocmrc::eval::render_table(&[(split.clone(), report)]));
            println!("{}", path.display());
        }
        Command::Report { inputs } => {
            let table = pipeline::report_command(inputs)?;
            print!("{table}");
            if let Some(out) = &cli.out {
                std::fs::create_dir_all(out).map_err(|e| ocmrc::Error::io(out, e))?;
                ocmrc::corpus::write_atomic(&out.join("report.txt"), table.as_bytes())?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
