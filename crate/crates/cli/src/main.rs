//! `vrag`: operator surface for the retrieval-augmented agent framework.
//!
//! Subcommands cover synthetic corpus generation, agent rollouts, reward
//! scoring, toy GRPO training, and expert dataset synthesis. Every command
//! writes a run manifest to the output directory before any other artifact;
//! re-running with `--config <run_manifest.json>` reproduces simulated-only
//! runs bit for bit.

mod commands;
mod config;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{load_config_file, CliError, RunConfig, WeightsProfile};

#[derive(Parser)]
#[command(name = "vrag", version, about = "Multi-turn visual RAG agent toolkit")]
struct Cli {
    /// Config file or run manifest to start from.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Corpus manifest path (corpus.json).
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    policy_endpoint: Option<String>,
    #[arg(long, global = true)]
    judge_endpoint: Option<String>,
    #[arg(long, global = true, value_enum)]
    weights_profile: Option<WeightsProfile>,
    #[arg(long, global = true)]
    group_size: Option<usize>,
    /// Maximum agent iterations per episode.
    #[arg(long, global = true)]
    max_steps: Option<u32>,
    /// Skip judge calls; answer-dependent reward columns are omitted.
    #[arg(long, global = true)]
    no_judge: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic corpus with planted tasks.
    GenCorpus {
        #[arg(long, default_value = "synthetic")]
        corpus_id: String,
        #[arg(long, default_value_t = 24)]
        docs: usize,
        #[arg(long, default_value_t = 4)]
        tasks: usize,
        #[arg(long, default_value_t = 640)]
        page_width: u32,
        #[arg(long, default_value_t = 480)]
        page_height: u32,
    },
    /// Run rollout groups over the corpus tasks and report batch metrics.
    Rollout,
    /// Score a trajectory file against the composite reward.
    Score {
        /// Trajectory file (JSONL) to score.
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the toy policy with GRPO on the planted task.
    TrainToy {
        #[arg(long)]
        updates: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        kl: Option<f64>,
    },
    /// Synthesize a balanced fine-tuning dataset via expert sampling.
    Synthesize {
        /// Trajectories to collect in the default 2-step bucket.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// JSON file of bucket targets [{steps, searches, regions, count}].
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        max_attempts: usize,
    },
}

/// Resolves the effective config: defaults, then file, then environment,
/// then flags.
fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => load_config_file(path)?,
        None => RunConfig::default(),
    };
    config.apply_env();
    if let Some(v) = cli.seed {
        config.seed = v;
    }
    if let Some(v) = &cli.corpus {
        config.corpus = Some(v.clone());
    }
    if let Some(v) = &cli.policy_endpoint {
        config.policy_endpoint = Some(v.clone());
    }
    if let Some(v) = &cli.judge_endpoint {
        config.judge_endpoint = Some(v.clone());
    }
    if let Some(v) = cli.weights_profile {
        config.weights_profile = v;
    }
    if let Some(v) = cli.group_size {
        config.group_size = v;
    }
    if let Some(v) = cli.max_steps {
        config.max_steps = v;
    }
    if cli.no_judge {
        config.no_judge = true;
    }
    if let Some(v) = &cli.out {
        config.out = v.clone();
    }
    if let Command::TrainToy { updates, lr, kl } = &cli.command {
        if let Some(v) = updates {
            config.updates = *v;
        }
        if let Some(v) = lr {
            config.learning_rate = *v;
        }
        if let Some(v) = kl {
            config.kl_coefficient = *v;
        }
    }
    if config.group_size == 0 {
        return Err(CliError::Config("group_size: must be at least 1".to_string()));
    }
    if config.max_steps == 0 {
        return Err(CliError::Config("max_steps: must be at least 1".to_string()));
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let config = resolve_config(cli)?;
    match &cli.command {
        Command::GenCorpus {
            corpus_id,
            docs,
            tasks,
            page_width,
            page_height,
        } => commands::cmd_gen_corpus(
            &config,
            &commands::GenCorpusArgs {
                corpus_id: corpus_id.clone(),
                docs: *docs,
                tasks: *tasks,
                page_width: *page_width,
                page_height: *page_height,
            },
        ),
        Command::Rollout => commands::cmd_rollout(&config),
        Command::Score { input } => commands::cmd_score(&config, input),
        Command::TrainToy { .. } => commands::cmd_train_toy(&config),
        Command::Synthesize {
            count,
            targets,
            max_attempts,
        } => commands::cmd_synthesize(
            &config,
            &commands::SynthesizeArgs {
                count: *count,
                targets: targets.clone(),
                max_attempts: *max_attempts,
            },
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
