//! `multistream`: reproducible experiments from one JSON config.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (with a report written
//! to `<output_dir>/error.json`), 2 on an invalid configuration.

mod commands;
mod config;
mod dataset;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use multistream::featio::Channel;

use crate::config::{ExperimentConfig, FieldError};

#[derive(Parser)]
#[command(name = "multistream", version, about = "Multi-stream masked cluster prediction experiments")]
struct Cli {
    /// JSON experiment config; defaults apply to everything it leaves out.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one field, e.g. `--set train.total_steps=100`. Values are JSON, or strings.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset into the dataset directory.
    GenSynthetic,
    /// Fit per-channel k-means models.
    KmeansFit,
    /// Assign pseudo-labels to every sequence with the fitted models.
    KmeansAssign,
    /// Masked cluster prediction pretraining.
    Pretrain,
    /// Export layer-mixed encoder features, one file per sequence.
    Extract {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the configured adapter and classifier heads on the labeled set.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Recall@{1,5,10} of a saved downstream model.
    Eval {
        /// Directory written by `finetune`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Evaluate every labeled sequence instead of the test split.
        #[arg(long)]
        all: bool,
    },
    /// Masking strategies × adapter modes, one table row per pair.
    Ablate,
    /// Sample member frames of each cluster for inspection.
    DumpClusters {
        /// One of face, left_hand, right_hand, body_pose; all when omitted.
        #[arg(long, value_parser = parse_channel)]
        channel: Option<Channel>,
        /// Comma-separated cluster ids; all when omitted.
        #[arg(long, value_delimiter = ',')]
        clusters: Option<Vec<u32>>,
        #[arg(long, default_value_t = 10)]
        per_cluster: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSynthetic => "gen-synthetic",
            Command::KmeansFit => "kmeans-fit",
            Command::KmeansAssign => "kmeans-assign",
            Command::Pretrain => "pretrain",
            Command::Extract { .. } => "extract",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
            Command::DumpClusters { .. } => "dump-clusters",
        }
    }
}

fn parse_channel(s: &str) -> Result<Channel, String> {
    Channel::ALL
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| format!("unknown channel {s}; expected face, left_hand, right_hand or body_pose"))
}

fn config_failure(errors: &[FieldError]) -> ExitCode {
    let report = serde_json::json!({ "kind": "config", "errors": errors });
    eprintln!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    for e in errors {
        eprintln!("config error: {e}");
    }
    ExitCode::from(2)
}

fn runtime_failure(cfg: &ExperimentConfig, command: &str, err: &anyhow::Error) -> ExitCode {
    let chain: Vec<String> = err.chain().map(|e| e.to_string()).collect();
    let path = cfg.paths.output_dir.join("error.json");
    let report = serde_json::json!({ "kind": "runtime", "command": command, "error": chain });
    let written = std::fs::create_dir_all(&cfg.paths.output_dir)
        .and_then(|_| std::fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes")));
    eprintln!("error: {}", chain.join(": "));
    match written {
        Ok(()) => eprintln!("diagnostic report: {}", path.display()),
        Err(e) => eprintln!("could not write {}: {e}", path.display()),
    }
    ExitCode::from(1)
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    std::fs::create_dir_all(&cfg.paths.output_dir)?;
    cfg.write(&cfg.paths.output_dir.join(commands::RESOLVED_CONFIG))?;
    match &cli.command {
        Command::GenSynthetic => commands::gen_synthetic_cmd(cfg),
        Command::KmeansFit => commands::kmeans_fit(cfg),
        Command::KmeansAssign => commands::kmeans_assign(cfg),
        Command::Pretrain => commands::pretrain_cmd(cfg),
        Command::Extract { checkpoint } => commands::extract(cfg, checkpoint.as_deref()),
        Command::Finetune { checkpoint } => commands::finetune(cfg, checkpoint.as_deref()),
        Command::Eval { model, all } => commands::eval(cfg, model.as_deref(), *all),
        Command::Ablate => commands::ablate(cfg),
        Command::DumpClusters {
            channel,
            clusters,
            per_cluster,
        } => commands::dump_clusters(cfg, *channel, clusters.as_deref(), *per_cluster),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match config::load(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(errors) => return config_failure(&errors),
    };
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => runtime_failure(&cfg, cli.command.name(), &e),
    }
}
