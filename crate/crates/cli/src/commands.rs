//! Command implementations.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use vrag_core::chat::{ChatClient, ChatError, ChatMessage, DecodingParams};
use vrag_core::expert::{
    synthesize_dataset, to_finetune_record, BucketCount, BucketKey, ExpertClients,
    SynthesisConfig,
};
use vrag_core::grpo::{
    save_checkpoint, train_toy, write_curve_csv, GrpoConfig, ToyEnv, ToyPolicy, TOY_NUM_ACTIONS,
    TOY_NUM_STATES,
};
use vrag_core::retrieval::{
    generate_synthetic_corpus, load_corpus, write_corpus, Corpus, RemoteSearchClient, SearchEnv,
    SimulatedRetriever, SyntheticCorpusSpec,
};
use vrag_core::reward::{
    pattern_reward, retrieval_reward, score_trajectory, HttpJudge, JudgeClient,
};
use vrag_core::rollout::{
    rollout_group, EnvironmentBundle, PolicyClient, RemotePolicy, ScriptedPolicy,
};
use vrag_core::trajectory::{
    compute_metrics, read_trajectories, write_trajectories, FinishReason, QueryTask, Role,
    RolloutConfig, Trajectory,
};

use crate::config::{CliError, RunConfig, RunManifest};
use crate::plot;

fn chat_client(endpoint: &str) -> ChatClient {
    let client = ChatClient::new(endpoint, "default");
    match RunConfig::api_key() {
        Some(key) => client.with_api_key(key),
        None => client,
    }
}

fn load_required_corpus(config: &RunConfig) -> Result<(Arc<Corpus>, Vec<QueryTask>), CliError> {
    let path = config.corpus.as_ref().ok_or_else(|| {
        CliError::Config("corpus: path to a corpus manifest is required".to_string())
    })?;
    let (corpus, tasks) = load_corpus(path)
        .map_err(|e| CliError::Environment(format!("loading corpus {}: {e}", path.display())))?;
    if tasks.is_empty() {
        return Err(CliError::Config(format!(
            "corpus: manifest {} contains no tasks",
            path.display()
        )));
    }
    Ok((Arc::new(corpus), tasks))
}

fn build_env(config: &RunConfig, corpus: &Arc<Corpus>) -> EnvironmentBundle {
    let retriever: Arc<dyn SearchEnv> = match &config.search_endpoint {
        Some(url) => Arc::new(RemoteSearchClient::new(url.clone())),
        None => Arc::new(SimulatedRetriever {
            corpus: corpus.clone(),
            seed: config.seed,
        }),
    };
    EnvironmentBundle::new(retriever)
}

// ---------------------------------------------------------------------------
// gen-corpus
// ---------------------------------------------------------------------------

pub struct GenCorpusArgs {
    pub corpus_id: String,
    pub docs: usize,
    pub tasks: usize,
    pub page_width: u32,
    pub page_height: u32,
}

pub fn cmd_gen_corpus(config: &RunConfig, args: &GenCorpusArgs) -> Result<(), CliError> {
    RunManifest::new("gen-corpus", config).write()?;
    let spec = SyntheticCorpusSpec {
        corpus_id: args.corpus_id.clone(),
        num_docs: args.docs,
        num_tasks: args.tasks,
        seed: config.seed,
        page_width: args.page_width,
        page_height: args.page_height,
        ..Default::default()
    };
    let (corpus, tasks) = generate_synthetic_corpus(&spec);
    let manifest_path = write_corpus(&config.out, &corpus, &tasks)
        .map_err(|e| CliError::Environment(format!("writing corpus: {e}")))?;
    println!(
        "wrote corpus {} ({} documents, {} tasks) to {}",
        args.corpus_id,
        corpus.len(),
        tasks.len(),
        manifest_path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// rollout
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RolloutReport {
    finish_rate: f64,
    invalid_action_rate: f64,
    mean_steps: f64,
    mean_r_ret: f64,
    mean_r_pat: f64,
}

pub fn cmd_rollout(config: &RunConfig) -> Result<(), CliError> {
    let (corpus, tasks) = load_required_corpus(config)?;
    RunManifest::new("rollout", config).write()?;
    let env = build_env(config, &corpus);
    let rollout_config = RolloutConfig {
        max_iterations: config.max_steps,
        ..Default::default()
    };
    let params = DecodingParams::default();

    let remote = config
        .policy_endpoint
        .as_ref()
        .map(|url| RemotePolicy {
            client: chat_client(url),
        });

    let mut trajectories: Vec<Trajectory> = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        let oracle;
        let policy: &dyn PolicyClient = match &remote {
            Some(r) => r,
            None => {
                oracle = ScriptedPolicy::oracle(task, &corpus);
                &oracle
            }
        };
        let seed = config.seed + (i as u64) * config.group_size as u64;
        trajectories.extend(rollout_group(
            task,
            policy,
            &env,
            &rollout_config,
            &params,
            config.group_size,
            seed,
        ));
    }

    if remote.is_some()
        && trajectories
            .iter()
            .all(|t| t.finish_reason == Some(FinishReason::FatalError))
    {
        return Err(CliError::Environment(format!(
            "policy endpoint {} produced no completions",
            config.policy_endpoint.as_deref().unwrap_or("")
        )));
    }

    write_trajectories(&config.out.join("trajectories.jsonl"), &trajectories)
        .map_err(|e| CliError::Environment(format!("writing trajectories: {e}")))?;

    let metrics = compute_metrics(&trajectories)
        .map_err(|e| CliError::Environment(format!("computing metrics: {e}")))?;
    let task_by_id: HashMap<&str, &QueryTask> =
        tasks.iter().map(|t| (t.id.as_str(), t)).collect();
    let (mut sum_ret, mut sum_pat) = (0.0, 0.0);
    for t in &trajectories {
        if let Some(task) = task_by_id.get(t.task_id.as_str()) {
            sum_ret += retrieval_reward(&t.retrieved_doc_ids, &task.golden_doc_ids).0;
        }
        sum_pat += pattern_reward(t);
    }
    let n = trajectories.len().max(1) as f64;
    let report = RolloutReport {
        finish_rate: metrics.finish_rate,
        invalid_action_rate: metrics.invalid_action_rate,
        mean_steps: metrics.mean_steps,
        mean_r_ret: sum_ret / n,
        mean_r_pat: sum_pat / n,
    };
    std::fs::write(
        config.out.join("metrics.json"),
        serde_json::to_string_pretty(&report).unwrap(),
    )
    .map_err(|e| CliError::Environment(format!("writing metrics: {e}")))?;

    println!("trajectories          {}", trajectories.len());
    println!("finish_rate           {:.4}", report.finish_rate);
    println!("invalid_action_rate   {:.4}", report.invalid_action_rate);
    println!("mean_steps            {:.4}", report.mean_steps);
    println!("mean_r_ret            {:.4}", report.mean_r_ret);
    println!("mean_r_pat            {:.4}", report.mean_r_pat);
    Ok(())
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ScoreRow {
    task_id: String,
    r_ret: f64,
    r_pat: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_ans: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_total: Option<f64>,
}

pub fn cmd_score(config: &RunConfig, input: &Path) -> Result<(), CliError> {
    let (_, tasks) = load_required_corpus(config)?;
    RunManifest::new("score", config).write()?;
    let weights = config.weights()?;

    let judge: Option<HttpJudge> = if config.no_judge {
        None
    } else {
        let url = config.judge_endpoint.as_ref().ok_or_else(|| {
            CliError::Config("judge_endpoint: required unless --no-judge".to_string())
        })?;
        Some(HttpJudge::new(chat_client(url)))
    };

    let (trajectories, mut skipped) = read_trajectories(input)
        .map_err(|e| CliError::Environment(format!("reading {}: {e}", input.display())))?;
    let total = trajectories.len() + skipped;
    let task_by_id: HashMap<&str, &QueryTask> =
        tasks.iter().map(|t| (t.id.as_str(), t)).collect();

    let mut rows = Vec::new();
    for t in &trajectories {
        let Some(task) = task_by_id.get(t.task_id.as_str()) else {
            log::warn!("skipping trajectory for unknown task {}", t.task_id);
            skipped += 1;
            continue;
        };
        let row = match &judge {
            Some(judge) => {
                let b = score_trajectory(t, task, judge, &weights)
                    .map_err(|e| CliError::Environment(format!("judge: {e}")))?;
                ScoreRow {
                    task_id: t.task_id.clone(),
                    r_ret: b.r_ret,
                    r_pat: b.r_pat,
                    r_ans: Some(b.r_ans),
                    r_total: Some(b.r_total),
                }
            }
            None => ScoreRow {
                task_id: t.task_id.clone(),
                r_ret: retrieval_reward(&t.retrieved_doc_ids, &task.golden_doc_ids).0,
                r_pat: pattern_reward(t),
                r_ans: None,
                r_total: None,
            },
        };
        rows.push(row);
    }

    std::fs::write(
        config.out.join("scores.json"),
        serde_json::to_string_pretty(&rows).unwrap(),
    )
    .map_err(|e| CliError::Environment(format!("writing scores: {e}")))?;

    let with_judge = judge.is_some();
    if with_judge {
        println!("{:<16} {:>8} {:>8} {:>8} {:>8}", "task", "r_ret", "r_pat", "r_ans", "r_total");
    } else {
        println!("{:<16} {:>8} {:>8}", "task", "r_ret", "r_pat");
    }
    for row in &rows {
        match (row.r_ans, row.r_total) {
            (Some(ans), Some(total)) => println!(
                "{:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                row.task_id, row.r_ret, row.r_pat, ans, total
            ),
            _ => println!("{:<16} {:>8.4} {:>8.4}", row.task_id, row.r_ret, row.r_pat),
        }
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} of {total} records");
    }
    if total > 0 && (skipped as f64) / (total as f64) > 0.10 {
        return Err(CliError::Quality(format!(
            "{skipped} of {total} records were corrupt or unmatched (>10%)"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// train-toy
// ---------------------------------------------------------------------------

pub fn cmd_train_toy(config: &RunConfig) -> Result<(), CliError> {
    RunManifest::new("train-toy", config).write()?;
    let env = ToyEnv {
        weights: config.weights()?,
        max_steps: 4,
    };
    let grpo = GrpoConfig {
        group_size: config.group_size,
        learning_rate: config.learning_rate,
        kl_coefficient: config.kl_coefficient,
        ..Default::default()
    };
    let mut policy = ToyPolicy::uniform(TOY_NUM_STATES, TOY_NUM_ACTIONS);
    let curve = train_toy(&env, &mut policy, &grpo, config.updates, config.seed)
        .map_err(|e| CliError::Config(format!("trainer: {e}")))?;

    write_curve_csv(&config.out.join("curve.csv"), &curve)
        .map_err(|e| CliError::Environment(format!("writing curve: {e}")))?;
    let reward_series: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.update as f64, p.mean_reward))
        .collect();
    let greedy_series: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.update as f64, p.greedy_reward))
        .collect();
    let svg = plot::line_chart(
        "toy training reward vs update",
        &[("mean_reward", reward_series), ("greedy_reward", greedy_series)],
    );
    std::fs::write(config.out.join("curve.svg"), svg)
        .map_err(|e| CliError::Environment(format!("writing plot: {e}")))?;
    save_checkpoint(&config.out.join("checkpoint.bin"), &policy, &grpo, config.seed)
        .map_err(|e| CliError::Environment(format!("writing checkpoint: {e}")))?;

    let optimal = env.enumerate_optimal_reward();
    let greedy = env.greedy_reward(&policy);
    println!("updates               {}", config.updates);
    println!("greedy_reward         {greedy:.4}");
    println!("enumerated_optimum    {optimal:.4}");
    if curve.diverged {
        return Err(CliError::Quality("training diverged".to_string()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// synthesize
// ---------------------------------------------------------------------------

/// Offline guide that replays the planted-corpus oracle: search for the
/// golden surrogate of the task named in the opening user message, then
/// answer with the reference answer.
struct OracleGuide {
    by_question: HashMap<String, ScriptedPolicy>,
}

impl OracleGuide {
    fn new(tasks: &[QueryTask], corpus: &Corpus) -> Self {
        let by_question = tasks
            .iter()
            .map(|t| (format!("Query: {}", t.question), ScriptedPolicy::oracle(t, corpus)))
            .collect();
        OracleGuide { by_question }
    }
}

impl PolicyClient for OracleGuide {
    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &DecodingParams,
        seed: u64,
    ) -> Result<String, ChatError> {
        let question = messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(ChatMessage::text_content)
            .unwrap_or_default();
        let script = self
            .by_question
            .get(&question)
            .ok_or_else(|| ChatError::MalformedResponse("unknown task".to_string()))?;
        script.generate(messages, params, seed)
    }
}

/// Offline judge for simulated runs: exact match after whitespace and case
/// normalization.
struct ExactMatchJudge;

impl JudgeClient for ExactMatchJudge {
    fn evaluate(&self, _: &str, reference: &str, generated: &str) -> Result<String, ChatError> {
        let norm = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        if norm(reference) == norm(generated) {
            Ok("<judge>True</judge>".to_string())
        } else {
            Ok("<judge>False</judge>".to_string())
        }
    }
}

pub struct SynthesizeArgs {
    pub count: usize,
    pub targets: Option<PathBuf>,
    pub max_attempts: usize,
}

pub fn cmd_synthesize(config: &RunConfig, args: &SynthesizeArgs) -> Result<(), CliError> {
    let (corpus, tasks) = load_required_corpus(config)?;
    RunManifest::new("synthesize", config).write()?;
    let env = build_env(config, &corpus);
    let weights = config.weights()?;

    let targets: BTreeMap<BucketKey, usize> = match &args.targets {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("targets file {}: {e}", path.display())))?;
            let counts: Vec<BucketCount> = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("targets file {}: {e}", path.display())))?;
            counts
                .into_iter()
                .map(|c| {
                    (
                        BucketKey {
                            steps: c.steps,
                            searches: c.searches,
                            regions: c.regions,
                        },
                        c.count,
                    )
                })
                .collect()
        }
        None => {
            // the offline oracle guide always plays search-then-answer
            let mut t = BTreeMap::new();
            t.insert(
                BucketKey {
                    steps: 2,
                    searches: 1,
                    regions: 0,
                },
                args.count,
            );
            t
        }
    };

    let remote_guide = config.policy_endpoint.as_ref().map(|url| RemotePolicy {
        client: chat_client(url),
    });
    let oracle_guide;
    let guide: &dyn PolicyClient = match &remote_guide {
        Some(r) => r,
        None => {
            oracle_guide = OracleGuide::new(&tasks, &corpus);
            &oracle_guide
        }
    };
    // without a dedicated grounding endpoint the guide doubles as grounder
    let clients = ExpertClients {
        guide,
        grounder: guide,
    };

    let remote_judge = if config.no_judge {
        None
    } else {
        config
            .judge_endpoint
            .as_ref()
            .map(|url| HttpJudge::new(chat_client(url)))
    };
    let exact_judge = ExactMatchJudge;
    let judge: &dyn JudgeClient = match &remote_judge {
        Some(j) => j,
        None => &exact_judge,
    };

    let synthesis = SynthesisConfig {
        targets,
        max_attempts: args.max_attempts,
        max_iterations: config.max_steps,
        weights,
        seed: config.seed,
    };
    let (exported, manifest) = synthesize_dataset(&tasks, &clients, &env, judge, &synthesis)
        .map_err(|e| CliError::Config(format!("synthesis: {e}")))?;

    let records: Vec<_> = exported.iter().map(to_finetune_record).collect();
    vrag_core::expert::write_finetune_records(&config.out.join("dataset.jsonl"), &records)
        .map_err(|e| CliError::Environment(format!("writing dataset: {e}")))?;
    let trajectories: Vec<Trajectory> = exported.iter().map(|s| s.trajectory.clone()).collect();
    write_trajectories(&config.out.join("trajectories.jsonl"), &trajectories)
        .map_err(|e| CliError::Environment(format!("writing trajectories: {e}")))?;
    std::fs::write(
        config.out.join("dataset_manifest.json"),
        serde_json::to_string_pretty(&manifest).unwrap(),
    )
    .map_err(|e| CliError::Environment(format!("writing dataset manifest: {e}")))?;

    println!(
        "{:<8} {:<10} {:<8} {:>8} {:>10}",
        "steps", "searches", "regions", "target", "achieved"
    );
    for t in &manifest.target {
        let achieved = manifest
            .achieved
            .iter()
            .find(|a| a.steps == t.steps && a.searches == t.searches && a.regions == t.regions)
            .map(|a| a.count)
            .unwrap_or(0);
        println!(
            "{:<8} {:<10} {:<8} {:>8} {:>10}",
            t.steps, t.searches, t.regions, t.count, achieved
        );
    }
    println!("attempts              {}", manifest.attempts);
    if manifest.budget_exhausted {
        return Err(CliError::Quality(
            "attempt budget exhausted before balancing targets were met".to_string(),
        ));
    }
    Ok(())
}
