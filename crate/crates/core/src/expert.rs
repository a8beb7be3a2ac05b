//! Multi-expert trajectory synthesis.
//!
//! A guide model plans the thought and action for each step; whenever the
//! guide proposes a region, a grounding expert re-annotates the bounding box
//! and the expert's coordinates replace the guide's. Completed episodes pass
//! a quality gate (answered, clean action pattern, judge-confirmed answer)
//! and are rejection-sampled into step-count/action-mix buckets until the
//! balancing targets are met or the attempt budget runs out.

use std::collections::{BTreeMap, HashMap};
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{parse_response, render_response, Action, Violation};
use crate::chat::{ChatError, ChatMessage, ContentPart, DecodingParams};
use crate::perception::{apply_region_action, EncodedView, ImageDocument};
use crate::retrieval::FetchedDocument;
use crate::reward::{pattern_reward, score_trajectory, JudgeClient, RewardWeights};
use crate::rollout::{observe_crop, observe_document, png_data_url, EnvironmentBundle, PolicyClient};
use crate::trajectory::{FinishReason, QueryTask, Role, Trajectory, Turn};

/// The two expert endpoints. Both speak the same wire protocol as any
/// policy: a chat history in, one completion out.
pub struct ExpertClients<'a> {
    pub guide: &'a dyn PolicyClient,
    pub grounder: &'a dyn PolicyClient,
}

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("guide response unparseable after re-prompt: {0:?}")]
    GuideUnparseable(Vec<Violation>),
    #[error("guide endpoint unreachable: {0}")]
    GuideUnreachable(ChatError),
    #[error("grounding expert produced an unusable region: {0}")]
    GroundingDegenerate(String),
    #[error("episode rejected: {0}")]
    Rejected(String),
    #[error("invalid balancing targets: {0}")]
    InvalidTargets(String),
    #[error("reward error during quality gate: {0}")]
    Reward(#[from] crate::reward::RewardError),
}

/// Who supplied the coordinates of an exported step's region action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionSource {
    Guide,
    Expert,
}

/// One planned step after expert substitution, re-rendered canonically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizedStep {
    pub thought: String,
    pub action: Action,
    pub region_source: Option<RegionSource>,
}

/// A completed synthesized episode: the trajectory record, the chat history
/// it was produced from, and the per-step provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesizedTrajectory {
    pub trajectory: Trajectory,
    pub messages: Vec<ChatMessage>,
    pub steps: Vec<SynthesizedStep>,
}

impl SynthesizedTrajectory {
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    pub fn action_mix(&self) -> (usize, usize) {
        let searches = self
            .steps
            .iter()
            .filter(|s| matches!(s.action, Action::Search { .. }))
            .count();
        let regions = self
            .steps
            .iter()
            .filter(|s| matches!(s.action, Action::Region { .. }))
            .count();
        (searches, regions)
    }

    pub fn bucket(&self) -> BucketKey {
        let (searches, regions) = self.action_mix();
        BucketKey {
            steps: self.step_count(),
            searches,
            regions,
        }
    }
}

/// Asks the guide for one step: on a grammar violation the guide is
/// re-prompted once with the violation list, then the step is discarded.
pub fn guide_step(
    messages: &[ChatMessage],
    guide: &dyn PolicyClient,
    params: &DecodingParams,
    seed: u64,
) -> Result<(String, Action), ExpertError> {
    let raw = guide
        .generate(messages, params, seed)
        .map_err(ExpertError::GuideUnreachable)?;
    let parsed = parse_response(&raw);
    if parsed.pattern_valid {
        if let Some(action) = parsed.action {
            return Ok((parsed.thought.unwrap_or_default(), action));
        }
    }
    let mut retry = messages.to_vec();
    retry.push(ChatMessage::text(Role::Assistant, raw));
    retry.push(ChatMessage::text(
        Role::User,
        format!(
            "Your response violated the required format ({:?}). Reply again \
             with reasoning in <think></think> and exactly one of <search>, \
             <bbox>, or <answer>.",
            parsed.violations
        ),
    ));
    let raw = guide
        .generate(&retry, params, seed)
        .map_err(ExpertError::GuideUnreachable)?;
    let parsed = parse_response(&raw);
    if parsed.pattern_valid {
        if let Some(action) = parsed.action {
            return Ok((parsed.thought.unwrap_or_default(), action));
        }
    }
    Err(ExpertError::GuideUnparseable(parsed.violations))
}

/// Replaces the bounding box of a guide-proposed region action with the
/// grounding expert's annotation. Non-region actions pass through unchanged.
pub fn reground_region(
    messages: &[ChatMessage],
    thought: &str,
    action: Action,
    grounder: &dyn PolicyClient,
    params: &DecodingParams,
    seed: u64,
) -> Result<(Action, Option<RegionSource>), ExpertError> {
    let Action::Region { target_index, .. } = action else {
        return Ok((action, None));
    };
    let mut prompt = messages.to_vec();
    prompt.push(ChatMessage::text(
        Role::User,
        format!(
            "Annotate the exact bounding box on the latest image for the \
             region this reasoning describes, as <bbox>[x1, y1, x2, y2]</bbox>.\n\
             Reasoning: {thought}"
        ),
    ));
    let raw = grounder
        .generate(&prompt, params, seed)
        .map_err(|e| ExpertError::GroundingDegenerate(e.to_string()))?;
    let parsed = parse_response(&raw);
    match parsed.action {
        Some(Action::Region { bbox, .. }) => Ok((
            Action::Region { bbox, target_index },
            Some(RegionSource::Expert),
        )),
        other => Err(ExpertError::GroundingDegenerate(format!(
            "expected a region annotation, got {other:?}"
        ))),
    }
}

/// Drives one guided episode against the environment. Any unusable step
/// (unparseable guide output, degenerate grounding, invalid action against
/// the environment, iteration budget without an answer) rejects the episode.
pub fn synthesize_trajectory(
    task: &QueryTask,
    clients: &ExpertClients,
    env: &EnvironmentBundle,
    max_iterations: u32,
    params: &DecodingParams,
    seed: u64,
) -> Result<SynthesizedTrajectory, ExpertError> {
    let mut trajectory = Trajectory::new(task.id.clone());
    let mut views: Vec<EncodedView> = Vec::new();
    let mut fetched: HashMap<String, FetchedDocument> = HashMap::new();
    let mut steps = Vec::new();
    let mut messages = vec![
        ChatMessage::text(Role::System, env.system_prompt.clone()),
        ChatMessage::text(Role::User, format!("Query: {}", task.question)),
    ];

    for _ in 0..max_iterations {
        let (thought, action) = guide_step(&messages, clients.guide, params, seed)?;
        let (action, region_source) = reground_region(
            &messages,
            &thought,
            action,
            clients.grounder,
            params,
            seed,
        )?;
        let raw = render_response(&thought, &action);
        let mut turn = Turn::assistant(raw.clone());
        turn.thought = Some(thought.clone());
        turn.action = Some(action.clone());
        trajectory.append_turn(turn).expect("unfinished trajectory");
        messages.push(ChatMessage::text(Role::Assistant, raw));
        steps.push(SynthesizedStep {
            thought,
            action: action.clone(),
            region_source,
        });

        let images = match &action {
            Action::Answer { .. } => {
                trajectory.finish(FinishReason::Answered);
                return Ok(SynthesizedTrajectory {
                    trajectory,
                    messages,
                    steps,
                });
            }
            Action::Search { query } => {
                let result = env
                    .retriever
                    .search(query, env.top_k)
                    .map_err(|e| ExpertError::Rejected(format!("search failed: {e}")))?;
                let mut images = Vec::new();
                for (doc_id, _) in &result.ranked {
                    let obs = observe_document(doc_id, env, &mut fetched, &mut views)
                        .map_err(ExpertError::Rejected)?;
                    images.push(obs);
                }
                images
            }
            Action::Region { bbox, target_index } => {
                let lookup =
                    |id: &str| -> Option<ImageDocument> { fetched.get(id).map(|f| f.doc.clone()) };
                let child =
                    apply_region_action(*bbox, *target_index, &views, &lookup, &env.profile)
                        .map_err(|e| ExpertError::GroundingDegenerate(e.to_string()))?;
                let obs = observe_crop(&child, &fetched).map_err(ExpertError::Rejected)?;
                views.push(child);
                vec![obs]
            }
        };

        let content: Vec<ContentPart> = images
            .iter()
            .map(|o| ContentPart::ImageUrl {
                url: png_data_url(&o.png),
            })
            .collect();
        messages.push(ChatMessage {
            role: Role::User,
            content,
        });
        let image_refs = images.into_iter().map(|o| o.image_ref).collect();
        trajectory
            .append_turn(Turn::observation(None, image_refs))
            .expect("unfinished trajectory");
    }

    Err(ExpertError::Rejected(
        "iteration budget exhausted without an answer".to_string(),
    ))
}

/// Histogram bucket: step count plus the search/region action mix (the
/// final answer step is implicit).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct BucketKey {
    pub steps: usize,
    pub searches: usize,
    pub regions: usize,
}

/// Balancing targets and sampling budget for dataset synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisConfig {
    pub targets: BTreeMap<BucketKey, usize>,
    /// Total episode attempts before giving up with a partial manifest.
    pub max_attempts: usize,
    pub max_iterations: u32,
    pub weights: RewardWeights,
    pub seed: u64,
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<(), ExpertError> {
        if self.targets.is_empty() {
            return Err(ExpertError::InvalidTargets("no buckets requested".into()));
        }
        for (key, &count) in &self.targets {
            if !(2..=6).contains(&key.steps) {
                return Err(ExpertError::InvalidTargets(format!(
                    "bucket with {} steps outside the allowed 2..=6 range",
                    key.steps
                )));
            }
            if key.searches + key.regions + 1 != key.steps {
                return Err(ExpertError::InvalidTargets(format!(
                    "bucket {key:?}: searches + regions + answer must equal steps"
                )));
            }
            if count == 0 {
                return Err(ExpertError::InvalidTargets(format!(
                    "bucket {key:?} requests zero trajectories"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketCount {
    pub steps: usize,
    pub searches: usize,
    pub regions: usize,
    pub count: usize,
}

/// Per-trajectory record in the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub task_id: String,
    pub steps: usize,
    pub searches: usize,
    pub regions: usize,
    pub region_sources: Vec<RegionSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub target: Vec<BucketCount>,
    pub achieved: Vec<BucketCount>,
    pub attempts: usize,
    pub budget_exhausted: bool,
}

fn bucket_counts(map: &BTreeMap<BucketKey, usize>) -> Vec<BucketCount> {
    map.iter()
        .map(|(k, &count)| BucketCount {
            steps: k.steps,
            searches: k.searches,
            regions: k.regions,
            count,
        })
        .collect()
}

/// Rejection-samples guided episodes across the task list until every
/// bucket target is met or `max_attempts` episodes have been tried. Only
/// episodes that end answered, keep a perfect action pattern, and get a
/// positive judge verdict are exported.
pub fn synthesize_dataset(
    tasks: &[QueryTask],
    clients: &ExpertClients,
    env: &EnvironmentBundle,
    judge: &dyn JudgeClient,
    config: &SynthesisConfig,
) -> Result<(Vec<SynthesizedTrajectory>, DatasetManifest), ExpertError> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(ExpertError::InvalidTargets("no tasks supplied".into()));
    }
    let params = DecodingParams::default();
    let mut achieved: BTreeMap<BucketKey, usize> = BTreeMap::new();
    let mut exported = Vec::new();
    let mut records = Vec::new();
    let mut attempts = 0usize;

    while attempts < config.max_attempts {
        if config
            .targets
            .iter()
            .all(|(k, &t)| achieved.get(k).copied().unwrap_or(0) >= t)
        {
            break;
        }
        let task = &tasks[attempts % tasks.len()];
        let seed = config.seed.wrapping_add(attempts as u64);
        attempts += 1;

        let synth = match synthesize_trajectory(
            task,
            clients,
            env,
            config.max_iterations,
            &params,
            seed,
        ) {
            Ok(s) => s,
            Err(ExpertError::GuideUnreachable(e)) => return Err(ExpertError::GuideUnreachable(e)),
            Err(_) => continue, // unusable episode, try again
        };

        let key = synth.bucket();
        let Some(&target) = config.targets.get(&key) else {
            continue;
        };
        if achieved.get(&key).copied().unwrap_or(0) >= target {
            continue;
        }
        // quality gate: perfect pattern plus a positive judge verdict
        if pattern_reward(&synth.trajectory) < 1.0 {
            continue;
        }
        let breakdown = score_trajectory(&synth.trajectory, task, judge, &config.weights)?;
        if breakdown.r_ans < 1.0 {
            continue;
        }

        *achieved.entry(key).or_insert(0) += 1;
        records.push(ManifestRecord {
            task_id: task.id.clone(),
            steps: key.steps,
            searches: key.searches,
            regions: key.regions,
            region_sources: synth.steps.iter().filter_map(|s| s.region_source).collect(),
        });
        exported.push(synth);
    }

    let budget_exhausted = config
        .targets
        .iter()
        .any(|(k, &t)| achieved.get(k).copied().unwrap_or(0) < t);
    let manifest = DatasetManifest {
        records,
        target: bucket_counts(&config.targets),
        achieved: bucket_counts(&achieved),
        attempts,
        budget_exhausted,
    };
    Ok((exported, manifest))
}

/// One chat-style fine-tuning record: the full message history of a
/// synthesized episode, images referenced as data URLs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneRecord {
    pub messages: Vec<ChatMessage>,
}

pub fn to_finetune_record(synth: &SynthesizedTrajectory) -> FineTuneRecord {
    FineTuneRecord {
        messages: synth.messages.clone(),
    }
}

/// Writes one JSON record per line.
pub fn write_finetune_records(
    path: &Path,
    records: &[FineTuneRecord],
) -> Result<(), std::io::Error> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        writeln!(out)?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::actions::render_response;
    use crate::retrieval::{
        generate_synthetic_corpus, Corpus, SimulatedRetriever, SyntheticCorpusSpec,
    };
    use crate::rollout::ScriptedPolicy;

    struct AlwaysJudge(&'static str);
    impl JudgeClient for AlwaysJudge {
        fn evaluate(&self, _: &str, _: &str, _: &str) -> Result<String, ChatError> {
            Ok(self.0.to_string())
        }
    }

    fn planted() -> (Arc<Corpus>, Vec<QueryTask>, EnvironmentBundle) {
        let spec = SyntheticCorpusSpec {
            num_docs: 6,
            num_tasks: 2,
            page_width: 64,
            page_height: 48,
            ..Default::default()
        };
        let (corpus, tasks) = generate_synthetic_corpus(&spec);
        let corpus = Arc::new(corpus);
        let env = EnvironmentBundle::new(Arc::new(SimulatedRetriever {
            corpus: corpus.clone(),
            seed: 0,
        }));
        (corpus, tasks, env)
    }

    fn fixed_grounder(bbox: [i32; 4]) -> ScriptedPolicy {
        let step = render_response(
            "grounding",
            &Action::Region {
                bbox,
                target_index: None,
            },
        );
        ScriptedPolicy::from_raw(vec![step; 16])
    }

    #[test]
    fn guide_step_retries_once_then_fails() {
        let guide = ScriptedPolicy::from_raw(vec![
            "no tags at all".to_string(),
            "<think>ok</think><search>q</search>".to_string(),
        ]);
        let messages = vec![ChatMessage::text(Role::User, "Query: x")];
        let (thought, action) =
            guide_step(&messages, &guide, &DecodingParams::default(), 0).unwrap();
        assert_eq!(thought, "ok");
        assert_eq!(
            action,
            Action::Search {
                query: "q".to_string()
            }
        );

        let guide = ScriptedPolicy::from_raw(vec![
            "garbage".to_string(),
            "still garbage".to_string(),
        ]);
        let err = guide_step(&messages, &guide, &DecodingParams::default(), 0).unwrap_err();
        assert!(matches!(err, ExpertError::GuideUnparseable(_)));
    }

    #[test]
    fn two_actions_in_one_guide_response_fail() {
        let guide = ScriptedPolicy::from_raw(vec![
            "<think>t</think><search>a</search><answer>b</answer>".to_string(),
            "<think>t</think><search>a</search><answer>b</answer>".to_string(),
        ]);
        let messages = vec![ChatMessage::text(Role::User, "Query: x")];
        let err = guide_step(&messages, &guide, &DecodingParams::default(), 0).unwrap_err();
        assert!(matches!(err, ExpertError::GuideUnparseable(_)));
    }

    #[test]
    fn expert_box_replaces_guide_box() {
        let grounder = fixed_grounder([120, 80, 400, 300]);
        let guide_action = Action::Region {
            bbox: [0, 0, 5, 5],
            target_index: None,
        };
        let (action, source) = reground_region(
            &[],
            "zoom to the table",
            guide_action,
            &grounder,
            &DecodingParams::default(),
            0,
        )
        .unwrap();
        assert_eq!(
            action,
            Action::Region {
                bbox: [120, 80, 400, 300],
                target_index: None
            }
        );
        assert_eq!(source, Some(RegionSource::Expert));
    }

    #[test]
    fn non_region_passes_through_grounding() {
        let grounder = fixed_grounder([0, 0, 1, 1]);
        let action = Action::Answer { text: "x".into() };
        let (out, source) = reground_region(
            &[],
            "t",
            action.clone(),
            &grounder,
            &DecodingParams::default(),
            0,
        )
        .unwrap();
        assert_eq!(out, action);
        assert_eq!(source, None);
    }

    #[test]
    fn grounder_emitting_non_region_is_degenerate() {
        let grounder = ScriptedPolicy::from_raw(vec![
            "<think>hm</think><answer>not a box</answer>".to_string(),
        ]);
        let err = reground_region(
            &[],
            "t",
            Action::Region {
                bbox: [0, 0, 5, 5],
                target_index: None,
            },
            &grounder,
            &DecodingParams::default(),
            0,
        )
        .unwrap_err();
        assert!(matches!(err, ExpertError::GroundingDegenerate(_)));
    }

    /// Guide that plays a 2-step script on even seeds and a 3-step script
    /// (with a region between search and answer) on odd seeds.
    struct ParityGuide {
        two: ScriptedPolicy,
        three: ScriptedPolicy,
    }

    impl PolicyClient for ParityGuide {
        fn generate(
            &self,
            messages: &[ChatMessage],
            params: &DecodingParams,
            seed: u64,
        ) -> Result<String, ChatError> {
            if seed % 2 == 0 {
                self.two.generate(messages, params, seed)
            } else {
                self.three.generate(messages, params, seed)
            }
        }
    }

    fn parity_guide(task: &QueryTask, corpus: &Corpus) -> ParityGuide {
        let golden = task.golden_doc_ids.iter().next().unwrap();
        let query = corpus.document(golden).unwrap().surrogate.clone();
        let search = ("find the page".to_string(), Action::Search { query });
        let answer = (
            "answer from the page".to_string(),
            Action::Answer {
                text: task.golden_answer.clone(),
            },
        );
        let region = (
            "zoom to the key region".to_string(),
            Action::Region {
                bbox: [0, 0, 5, 5],
                target_index: None,
            },
        );
        let render = |steps: &[(String, Action)]| {
            steps
                .iter()
                .map(|(t, a)| render_response(t, a))
                .collect::<Vec<_>>()
        };
        ParityGuide {
            two: ScriptedPolicy::from_raw(render(&[search.clone(), answer.clone()])),
            three: ScriptedPolicy::from_raw(render(&[search, region, answer])),
        }
    }

    #[test]
    fn synthesis_meets_balancing_targets() {
        let (corpus, tasks, env) = planted();
        let task = tasks[0].clone();
        let guide = parity_guide(&task, &corpus);
        let grounder = fixed_grounder([2, 2, 30, 22]);
        let clients = ExpertClients {
            guide: &guide,
            grounder: &grounder,
        };
        let judge = AlwaysJudge("<judge>True</judge>");
        let mut targets = BTreeMap::new();
        targets.insert(
            BucketKey {
                steps: 2,
                searches: 1,
                regions: 0,
            },
            2,
        );
        targets.insert(
            BucketKey {
                steps: 3,
                searches: 1,
                regions: 1,
            },
            2,
        );
        let config = SynthesisConfig {
            targets: targets.clone(),
            max_attempts: 32,
            max_iterations: 8,
            weights: RewardWeights::post_sft(),
            seed: 0,
        };
        let (exported, manifest) =
            synthesize_dataset(&[task], &clients, &env, &judge, &config).unwrap();
        assert!(!manifest.budget_exhausted);
        assert_eq!(exported.len(), 4);
        assert_eq!(manifest.achieved, bucket_counts(&targets));
        // region steps carry the expert's box, never the guide's [0,0,5,5]
        for synth in &exported {
            for step in &synth.steps {
                if let Action::Region { bbox, .. } = step.action {
                    assert_eq!(bbox, [2, 2, 30, 22]);
                    assert_eq!(step.region_source, Some(RegionSource::Expert));
                }
            }
            // exported turns re-parse cleanly
            for turn in &synth.trajectory.turns {
                if turn.role == Role::Assistant {
                    assert!(parse_response(&turn.text.clone().unwrap_or_default()).pattern_valid);
                }
            }
            assert_eq!(pattern_reward(&synth.trajectory), 1.0);
        }
    }

    #[test]
    fn judge_rejecting_everything_exhausts_budget() {
        let (corpus, tasks, env) = planted();
        let task = tasks[0].clone();
        let guide = parity_guide(&task, &corpus);
        let grounder = fixed_grounder([2, 2, 30, 22]);
        let clients = ExpertClients {
            guide: &guide,
            grounder: &grounder,
        };
        let judge = AlwaysJudge("<judge>False</judge>");
        let mut targets = BTreeMap::new();
        targets.insert(
            BucketKey {
                steps: 2,
                searches: 1,
                regions: 0,
            },
            1,
        );
        let config = SynthesisConfig {
            targets,
            max_attempts: 6,
            max_iterations: 8,
            weights: RewardWeights::post_sft(),
            seed: 0,
        };
        let (exported, manifest) =
            synthesize_dataset(&[task], &clients, &env, &judge, &config).unwrap();
        assert!(exported.is_empty());
        assert!(manifest.budget_exhausted);
        assert_eq!(manifest.attempts, 6);
    }

    #[test]
    fn seven_step_bucket_rejected() {
        let mut targets = BTreeMap::new();
        targets.insert(
            BucketKey {
                steps: 7,
                searches: 6,
                regions: 0,
            },
            1,
        );
        let config = SynthesisConfig {
            targets,
            max_attempts: 1,
            max_iterations: 8,
            weights: RewardWeights::post_sft(),
            seed: 0,
        };
        assert!(matches!(
            config.validate().unwrap_err(),
            ExpertError::InvalidTargets(_)
        ));
    }

    #[test]
    fn finetune_records_roundtrip() {
        let (corpus, tasks, env) = planted();
        let task = tasks[0].clone();
        let guide = parity_guide(&task, &corpus);
        let grounder = fixed_grounder([2, 2, 30, 22]);
        let clients = ExpertClients {
            guide: &guide,
            grounder: &grounder,
        };
        let synth = synthesize_trajectory(
            &task,
            &clients,
            &env,
            8,
            &DecodingParams::default(),
            1, // odd seed: search, region, answer
        )
        .unwrap();
        assert_eq!(synth.step_count(), 3);
        let record = to_finetune_record(&synth);
        assert_eq!(record.messages[0].role, Role::System);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sft.jsonl");
        write_finetune_records(&path, &[record.clone()]).unwrap();
        let line = std::fs::read_to_string(&path).unwrap();
        let parsed: FineTuneRecord = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(parsed, record);
    }
}
