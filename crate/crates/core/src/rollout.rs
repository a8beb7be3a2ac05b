//! The interaction loop: drive a policy through multi-turn exchanges with
//! the search environment and the perception engine until it answers or the
//! iteration budget runs out.
//!
//! Every assistant turn is parsed through the action grammar and dispatched:
//! searches append the retrieved page(s) as a user observation, region
//! actions append the zoomed crop, an answer finishes the episode, and
//! anything invalid appends a corrective observation and counts against the
//! invalid-action rate. Observations always enter with the user role.

use std::collections::HashMap;
use std::sync::Arc;

use base64::Engine as _;

use crate::actions::{parse_response, Action};
use crate::chat::{ChatError, ChatMessage, ContentPart, DecodingParams};
use crate::perception::{
    apply_region_action, render_view, EncodedView, EncoderProfile, ImageDocument,
};
use crate::retrieval::{hex_sha256, Corpus, FetchedDocument, SearchEnv};
use crate::trajectory::{
    CropProvenance, FinishReason, ImageRef, QueryTask, Role, RolloutConfig, Trajectory, Turn,
};

/// Default system prompt for the agent loop.
pub const SYSTEM_PROMPT: &str = "\
Answer the given question. You must conduct reasoning inside <think> and \
</think> first every time you get new information. After reasoning, if you \
find you lack some knowledge, you can call a search engine by <search> query \
</search> and user will return the searched results. Every time you retrieve \
an image, you have the option to crop it to obtain a clearer view, the format \
for coordinates is <bbox>[x1, y1, x2, y2]</bbox>. You can search as many \
times as your want. If you find no further external knowledge needed, you \
can directly provide the answer inside <answer> and </answer>, without \
detailed illustrations. For example, <answer> Beijing </answer>.";

/// A text policy the rollout engine can sample from.
pub trait PolicyClient: Send + Sync {
    /// Generates one assistant response given the conversation so far.
    /// `seed` distinguishes sampling streams within a group; deterministic
    /// policies may ignore it.
    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &DecodingParams,
        seed: u64,
    ) -> Result<String, ChatError>;
}

/// Deterministic policy replaying a fixed thought/action script. The step
/// index is recovered from the number of assistant messages in the prompt,
/// so one instance can serve concurrent rollouts.
pub struct ScriptedPolicy {
    pub script: Vec<String>,
}

impl ScriptedPolicy {
    pub fn from_actions(steps: &[(&str, Action)]) -> Self {
        ScriptedPolicy {
            script: steps
                .iter()
                .map(|(thought, action)| crate::actions::render_response(thought, action))
                .collect(),
        }
    }

    /// Raw response strings, allowing deliberately malformed steps.
    pub fn from_raw(script: Vec<String>) -> Self {
        ScriptedPolicy { script }
    }

    /// The closed-loop oracle for a planted-corpus task: search for each
    /// golden document's surrogate text, then answer with the reference
    /// answer.
    pub fn oracle(task: &QueryTask, corpus: &Corpus) -> Self {
        let mut golden: Vec<&String> = task.golden_doc_ids.iter().collect();
        golden.sort();
        let mut steps: Vec<(String, Action)> = golden
            .iter()
            .filter_map(|id| corpus.document(id))
            .map(|d| {
                (
                    "I need the relevant page.".to_string(),
                    Action::Search {
                        query: d.surrogate.clone(),
                    },
                )
            })
            .collect();
        steps.push((
            "The retrieved page answers the question.".to_string(),
            Action::Answer {
                text: task.golden_answer.clone(),
            },
        ));
        ScriptedPolicy {
            script: steps
                .iter()
                .map(|(t, a)| crate::actions::render_response(t, a))
                .collect(),
        }
    }
}

impl PolicyClient for ScriptedPolicy {
    fn generate(
        &self,
        messages: &[ChatMessage],
        _params: &DecodingParams,
        _seed: u64,
    ) -> Result<String, ChatError> {
        let step = messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .count();
        self.script
            .get(step)
            .cloned()
            .ok_or_else(|| ChatError::MalformedResponse("script exhausted".to_string()))
    }
}

/// Chat-endpoint-backed policy.
pub struct RemotePolicy {
    pub client: crate::chat::ChatClient,
}

impl PolicyClient for RemotePolicy {
    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &DecodingParams,
        _seed: u64,
    ) -> Result<String, ChatError> {
        self.client.complete(messages, params)
    }
}

/// Everything the loop interacts with besides the policy.
pub struct EnvironmentBundle {
    pub retriever: Arc<dyn SearchEnv>,
    pub profile: EncoderProfile,
    pub system_prompt: String,
    /// Pages inserted per search action.
    pub top_k: usize,
}

impl EnvironmentBundle {
    pub fn new(retriever: Arc<dyn SearchEnv>) -> Self {
        EnvironmentBundle {
            retriever,
            profile: EncoderProfile::default(),
            system_prompt: SYSTEM_PROMPT.to_string(),
            top_k: 1,
        }
    }
}

/// Rough prompt-size estimate in token units: four characters per token
/// plus a flat cost per image.
fn estimate_prompt_tokens(messages: &[ChatMessage]) -> u32 {
    let mut total = 0u32;
    for m in messages {
        for part in &m.content {
            total += match part {
                ContentPart::Text { text } => (text.len() / 4) as u32 + 4,
                ContentPart::ImageUrl { .. } => 1024,
            };
        }
    }
    total
}

pub(crate) fn png_data_url(png: &[u8]) -> String {
    format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(png)
    )
}

pub(crate) struct ObservationImage {
    pub(crate) image_ref: ImageRef,
    pub(crate) png: Vec<u8>,
}

/// Executes one episode. Policy failures abort the trajectory with
/// `FinishReason::FatalError`; environment errors become error observations.
pub fn rollout(
    task: &QueryTask,
    policy: &dyn PolicyClient,
    env: &EnvironmentBundle,
    config: &RolloutConfig,
    params: &DecodingParams,
    seed: u64,
) -> Trajectory {
    let mut trajectory = Trajectory::new(task.id.clone());
    let mut views: Vec<EncodedView> = Vec::new();
    let mut fetched: HashMap<String, FetchedDocument> = HashMap::new();
    let mut messages = vec![
        ChatMessage::text(Role::System, env.system_prompt.clone()),
        ChatMessage::text(Role::User, format!("Query: {}", task.question)),
    ];

    for _ in 0..config.max_iterations {
        if estimate_prompt_tokens(&messages) > config.max_prompt_tokens {
            break;
        }
        let raw = match policy.generate(&messages, params, seed) {
            Ok(raw) => raw,
            Err(e) => {
                log::warn!("policy unreachable, aborting trajectory: {e}");
                trajectory.finish(FinishReason::FatalError);
                return trajectory;
            }
        };
        let parsed = parse_response(&raw);
        let mut turn = Turn::assistant(raw.clone());
        turn.thought = parsed.thought.clone();
        turn.action = parsed.action.clone();
        trajectory.append_turn(turn).expect("unfinished trajectory");
        messages.push(ChatMessage::text(Role::Assistant, raw));

        let observation: (Option<String>, Vec<ObservationImage>) = match &parsed.action {
            Some(Action::Answer { .. }) => {
                trajectory.finish(FinishReason::Answered);
                return trajectory;
            }
            Some(Action::Search { query }) => {
                match env.retriever.search(query, env.top_k) {
                    Ok(result) => {
                        let mut images = Vec::new();
                        let mut failures = Vec::new();
                        for (doc_id, _) in &result.ranked {
                            match observe_document(doc_id, env, &mut fetched, &mut views) {
                                Ok(obs) => images.push(obs),
                                Err(e) => failures.push(format!("{doc_id}: {e}")),
                            }
                        }
                        let text = if failures.is_empty() {
                            None
                        } else {
                            Some(format!("search error: {}", failures.join("; ")))
                        };
                        (text, images)
                    }
                    Err(e) => (Some(format!("search error: {e}")), Vec::new()),
                }
            }
            Some(Action::Region { bbox, target_index }) => {
                let lookup = |id: &str| -> Option<ImageDocument> {
                    fetched.get(id).map(|f| f.doc.clone())
                };
                match apply_region_action(*bbox, *target_index, &views, &lookup, &env.profile) {
                    Ok(child) => match observe_crop(&child, &fetched) {
                        Ok(obs) => {
                            views.push(child);
                            (None, vec![obs])
                        }
                        Err(e) => {
                            trajectory.record_invalid_action();
                            (Some(format!("invalid action: {e}")), Vec::new())
                        }
                    },
                    Err(e) => {
                        trajectory.record_invalid_action();
                        (Some(format!("invalid action: {e}")), Vec::new())
                    }
                }
            }
            None => {
                trajectory.record_invalid_action();
                (
                    Some(format!("invalid action: {:?}", parsed.violations)),
                    Vec::new(),
                )
            }
        };

        let (text, images) = observation;
        let text = text.or_else(|| {
            if images.is_empty() {
                Some("invalid action".to_string())
            } else {
                None
            }
        });
        let mut content = Vec::new();
        if let Some(t) = &text {
            content.push(ContentPart::Text { text: t.clone() });
        }
        for obs in &images {
            content.push(ContentPart::ImageUrl {
                url: png_data_url(&obs.png),
            });
        }
        messages.push(ChatMessage {
            role: Role::User,
            content,
        });
        let image_refs = images.into_iter().map(|o| o.image_ref).collect();
        trajectory
            .append_turn(Turn::observation(text, image_refs))
            .expect("unfinished trajectory");
    }

    trajectory.finish(FinishReason::BudgetExhausted);
    trajectory
}

pub(crate) fn observe_document(
    doc_id: &str,
    env: &EnvironmentBundle,
    fetched: &mut HashMap<String, FetchedDocument>,
    views: &mut Vec<EncodedView>,
) -> Result<ObservationImage, String> {
    if !fetched.contains_key(doc_id) {
        let doc = env
            .retriever
            .fetch_document(doc_id)
            .map_err(|e| e.to_string())?;
        fetched.insert(doc_id.to_string(), doc);
    }
    let doc = &fetched[doc_id];
    let view = EncodedView::full_page(&doc.doc, &env.profile).map_err(|e| e.to_string())?;
    let png = render_view(&doc.pixels, &view).map_err(|e| e.to_string())?;
    let image_ref = ImageRef::document(hex_sha256(&png), doc_id);
    views.push(view);
    Ok(ObservationImage { image_ref, png })
}

pub(crate) fn observe_crop(
    view: &EncodedView,
    fetched: &HashMap<String, FetchedDocument>,
) -> Result<ObservationImage, String> {
    let doc = fetched
        .get(&view.doc_id)
        .ok_or_else(|| format!("document {} not in context", view.doc_id))?;
    let png = render_view(&doc.pixels, view).map_err(|e| e.to_string())?;
    let raw = view.raw_extent();
    Ok(ObservationImage {
        image_ref: ImageRef {
            hash: hex_sha256(&png),
            doc_id: Some(view.doc_id.clone()),
            crop: Some(CropProvenance {
                source_doc: view.doc_id.clone(),
                raw_box: raw.coords(),
            }),
        },
        png,
    })
}

/// Samples `group_size` independent episodes with distinct sampling seeds
/// (`seed + i`). Output order follows the seed index; a failed slot shows up
/// as a `FatalError` trajectory and never poisons its siblings.
pub fn rollout_group(
    task: &QueryTask,
    policy: &dyn PolicyClient,
    env: &EnvironmentBundle,
    config: &RolloutConfig,
    params: &DecodingParams,
    group_size: usize,
    seed: u64,
) -> Vec<Trajectory> {
    let run = |i: usize| rollout(task, policy, env, config, params, seed + i as u64);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..group_size).into_par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..group_size).map(run).collect()
    }
}

/// Sequential twin of [`rollout_group`], kept for benchmarking the parallel
/// fan-out against a single-threaded baseline.
pub fn rollout_group_sequential(
    task: &QueryTask,
    policy: &dyn PolicyClient,
    env: &EnvironmentBundle,
    config: &RolloutConfig,
    params: &DecodingParams,
    group_size: usize,
    seed: u64,
) -> Vec<Trajectory> {
    (0..group_size)
        .map(|i| rollout(task, policy, env, config, params, seed + i as u64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::{generate_synthetic_corpus, SimulatedRetriever, SyntheticCorpusSpec};

    fn planted_env() -> (Arc<Corpus>, Vec<QueryTask>, EnvironmentBundle) {
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

    #[test]
    fn oracle_rollout_answers_with_golden_retrieval() {
        let (corpus, tasks, env) = planted_env();
        let task = &tasks[0];
        let policy = ScriptedPolicy::oracle(task, &corpus);
        let t = rollout(
            task,
            &policy,
            &env,
            &RolloutConfig::default(),
            &DecodingParams::default(),
            0,
        );
        assert_eq!(t.finish_reason, Some(FinishReason::Answered));
        assert_eq!(t.step_count, 2);
        assert_eq!(t.invalid_action_count, 0);
        let golden: Vec<&String> = task.golden_doc_ids.iter().collect();
        assert_eq!(t.retrieved_doc_ids, vec![golden[0].clone()]);
        t.validate().unwrap();
    }

    #[test]
    fn region_before_retrieval_is_invalid_but_continues() {
        let (_, tasks, env) = planted_env();
        let policy = ScriptedPolicy::from_actions(&[
            (
                "zoom first",
                Action::Region {
                    bbox: [0, 0, 10, 10],
                    target_index: None,
                },
            ),
            ("answer", Action::Answer { text: "x".into() }),
        ]);
        let t = rollout(
            &tasks[0],
            &policy,
            &env,
            &RolloutConfig::default(),
            &DecodingParams::default(),
            0,
        );
        assert_eq!(t.invalid_action_count, 1);
        assert_eq!(t.finish_reason, Some(FinishReason::Answered));
        t.validate().unwrap();
    }

    #[test]
    fn search_forever_hits_budget() {
        let (_, tasks, env) = planted_env();
        let policy = ScriptedPolicy::from_raw(vec![
            "<think>again</think><search>anything</search>".to_string();
            10
        ]);
        let config = RolloutConfig {
            max_iterations: 3,
            ..Default::default()
        };
        let t = rollout(
            &tasks[0],
            &policy,
            &env,
            &config,
            &DecodingParams::default(),
            0,
        );
        assert_eq!(t.finish_reason, Some(FinishReason::BudgetExhausted));
        assert_eq!(t.step_count, 3);
        t.validate().unwrap();
    }

    #[test]
    fn region_after_search_appends_crop_observation() {
        let (_, tasks, env) = planted_env();
        let task = &tasks[0];
        let golden = task.golden_doc_ids.iter().next().unwrap().clone();
        let query = {
            // full surrogate guarantees the golden page comes back first
            let (corpus, _, _) = planted_env();
            corpus.document(&golden).unwrap().surrogate.clone()
        };
        let policy = ScriptedPolicy::from_actions(&[
            ("find it", Action::Search { query }),
            (
                "zoom",
                Action::Region {
                    bbox: [0, 0, 20, 20],
                    target_index: None,
                },
            ),
            ("done", Action::Answer { text: "x".into() }),
        ]);
        let t = rollout(
            task,
            &policy,
            &env,
            &RolloutConfig::default(),
            &DecodingParams::default(),
            0,
        );
        assert_eq!(t.invalid_action_count, 0);
        let crop_turn = &t.turns[3];
        assert_eq!(crop_turn.role, Role::User);
        assert_eq!(crop_turn.images.len(), 1);
        let crop = crop_turn.images[0].crop.as_ref().unwrap();
        assert_eq!(crop.source_doc, golden);
        t.validate().unwrap();
    }

    #[test]
    fn group_of_deterministic_policy_is_identical() {
        let (corpus, tasks, env) = planted_env();
        let policy = ScriptedPolicy::oracle(&tasks[0], &corpus);
        let group = rollout_group(
            &tasks[0],
            &policy,
            &env,
            &RolloutConfig::default(),
            &DecodingParams::default(),
            5,
            42,
        );
        assert_eq!(group.len(), 5);
        for t in &group[1..] {
            assert_eq!(t, &group[0]);
        }
    }

    #[test]
    fn exhausted_script_marks_fatal_slot() {
        let (_, tasks, env) = planted_env();
        let policy = ScriptedPolicy::from_raw(vec![
            "<think>one search only</think><search>x</search>".to_string(),
        ]);
        let t = rollout(
            &tasks[0],
            &policy,
            &env,
            &RolloutConfig::default(),
            &DecodingParams::default(),
            0,
        );
        assert_eq!(t.finish_reason, Some(FinishReason::FatalError));
    }
}
