//! The composite episode reward: retrieval efficiency (a modified NDCG over
//! the trajectory's retrieved documents), pattern consistency (did every
//! assistant turn follow the tag grammar and did the episode end with an
//! answer), and a judge-model verdict on the final answer, combined as
//! `r = α·r_ret + β·r_ans + γ·r_pat` with `α + β + γ = 1`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::parse_response;
use crate::chat::{ChatClient, ChatError, ChatMessage, DecodingParams};
use crate::trajectory::{FinishReason, QueryTask, Role, Trajectory};

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Component weights on the simplex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl RewardWeights {
    /// Profile for models already format-trained: no pattern weight.
    pub fn post_sft() -> Self {
        RewardWeights {
            alpha: 0.3,
            beta: 0.7,
            gamma: 0.0,
        }
    }

    /// Cold-start profile: a small pattern weight helps the model acquire
    /// the tag format.
    pub fn cold_start() -> Self {
        RewardWeights {
            alpha: 0.45,
            beta: 0.45,
            gamma: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        let sum = self.alpha + self.beta + self.gamma;
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE
            || self.alpha < 0.0
            || self.beta < 0.0
            || self.gamma < 0.0
        {
            return Err(RewardError::InvalidWeights { sum });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RewardFlag {
    /// The task has an empty golden set; its retrieval reward is a
    /// placeholder zero and must be excluded from retrieval aggregates.
    NoGolden,
    /// The judge never produced a parseable verdict; the outcome reward
    /// defaulted to zero.
    JudgeUnparseable,
}

/// Per-trajectory reward components and their combination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_ret: f64,
    pub r_ans: f64,
    pub r_pat: f64,
    pub r_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_transcript: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<RewardFlag>,
}

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("weights must be non-negative and sum to 1 (got sum {sum})")]
    InvalidWeights { sum: f64 },
    #[error("judge unreachable: {0}")]
    JudgeUnreachable(#[from] ChatError),
}

/// Discounted cumulative gain over binary relevance labels, positions
/// starting at 1.
pub fn dcg(labels: &[u8]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let gain = (2f64.powi(i32::from(s))) - 1.0;
            gain / ((i as f64) + 2.0).log2()
        })
        .sum()
}

/// Ideal DCG: all `n_rel` relevant documents retrieved first.
pub fn idcg(n_rel: usize) -> f64 {
    (1..=n_rel).map(|i| 1.0 / ((i as f64) + 1.0).log2()).sum()
}

/// Retrieval efficiency reward: DCG of the trajectory's retrieval order
/// normalized by the ideal. An empty golden set yields zero plus the
/// [`RewardFlag::NoGolden`] flag.
pub fn retrieval_reward(trajectory_doc_ids: &[String], golden: &HashSet<String>) -> (f64, bool) {
    if golden.is_empty() {
        return (0.0, true);
    }
    let labels = crate::retrieval::relevance_labels(trajectory_doc_ids, golden);
    (dcg(&labels) / idcg(golden.len()), false)
}

/// Pattern consistency reward: the fraction of assistant turns that parse
/// cleanly, gated by a terminal indicator (1 only if the episode ended with
/// an answer).
pub fn pattern_reward(trajectory: &Trajectory) -> f64 {
    if trajectory.finish_reason != Some(FinishReason::Answered) {
        return 0.0;
    }
    let assistant_turns: Vec<_> = trajectory
        .turns
        .iter()
        .filter(|t| t.role == Role::Assistant)
        .collect();
    if assistant_turns.is_empty() {
        return 0.0;
    }
    let valid = assistant_turns
        .iter()
        .filter(|t| {
            t.text
                .as_deref()
                .map(|raw| parse_response(raw).pattern_valid)
                .unwrap_or(false)
        })
        .count();
    valid as f64 / assistant_turns.len() as f64
}

/// A judge model that verdicts a generated answer against the reference.
pub trait JudgeClient: Send + Sync {
    /// Returns the raw judge completion for one evaluation request.
    fn evaluate(
        &self,
        question: &str,
        reference_answer: &str,
        generated_answer: &str,
    ) -> Result<String, ChatError>;
}

/// System prompt of the judge protocol. The `<judge>True or False</judge>`
/// response format is a frozen wire contract.
pub const JUDGE_SYSTEM_PROMPT: &str = "\
**Character Introduction**
You are an expert evaluation system for a question answering chatbot.
You are given the following information:
- the query
- a generated answer
- a reference answer
Your task is to evaluate the correctness of the generated answer.

**Response Format**
Your response should be formatted as following:
<judge>True or False</judge>

If the generated answer is correct, please set \"judge\" to True. Otherwise, please set \"judge\" to False.

Please note that the generated answer may contain additional information beyond the reference answer.";

/// Chat-endpoint-backed judge. Temperature is pinned to 0 for verdict
/// stability.
pub struct HttpJudge {
    client: ChatClient,
    max_tokens: u32,
}

impl HttpJudge {
    pub fn new(client: ChatClient) -> Self {
        HttpJudge {
            client,
            max_tokens: 64,
        }
    }
}

impl JudgeClient for HttpJudge {
    fn evaluate(
        &self,
        question: &str,
        reference_answer: &str,
        generated_answer: &str,
    ) -> Result<String, ChatError> {
        let messages = vec![
            ChatMessage::text(Role::System, JUDGE_SYSTEM_PROMPT),
            ChatMessage::text(
                Role::User,
                format!(
                    "Query: {question}\nReference Answer: {reference_answer}\nGenerated Answer: {generated_answer}"
                ),
            ),
        ];
        let params = DecodingParams {
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: self.max_tokens,
        };
        self.client.complete(&messages, &params)
    }
}

/// Extracts the binary verdict from a judge completion, case-insensitively.
pub fn parse_judge_verdict(raw: &str) -> Option<bool> {
    let lower = raw.to_lowercase();
    let start = lower.find("<judge>")?;
    let end = lower[start..].find("</judge>")? + start;
    let payload = lower[start + "<judge>".len()..end].trim();
    match payload {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}

/// Number of judge attempts before giving up on unparseable output.
pub const JUDGE_MAX_ATTEMPTS: u32 = 3;

/// Binary outcome reward from the judge. A missing predicted answer is 0
/// without a judge call; unparseable judge output across all attempts is 0
/// with [`RewardFlag::JudgeUnparseable`].
pub fn outcome_reward(
    task: &QueryTask,
    predicted_answer: Option<&str>,
    judge: &dyn JudgeClient,
) -> Result<(f64, Option<String>, Vec<RewardFlag>), RewardError> {
    let Some(predicted) = predicted_answer else {
        return Ok((0.0, None, Vec::new()));
    };
    let mut last_transcript = None;
    for _ in 0..JUDGE_MAX_ATTEMPTS {
        let raw = judge.evaluate(&task.question, &task.golden_answer, predicted)?;
        match parse_judge_verdict(&raw) {
            Some(verdict) => {
                return Ok((f64::from(verdict), Some(raw), Vec::new()));
            }
            None => last_transcript = Some(raw),
        }
    }
    Ok((0.0, last_transcript, vec![RewardFlag::JudgeUnparseable]))
}

/// Weighted combination of the three components.
pub fn combine(
    r_ret: f64,
    r_ans: f64,
    r_pat: f64,
    weights: &RewardWeights,
) -> Result<f64, RewardError> {
    weights.validate()?;
    Ok(weights.alpha * r_ret + weights.beta * r_ans + weights.gamma * r_pat)
}

/// Full scoring pipeline for one finished trajectory.
pub fn score_trajectory(
    trajectory: &Trajectory,
    task: &QueryTask,
    judge: &dyn JudgeClient,
    weights: &RewardWeights,
) -> Result<RewardBreakdown, RewardError> {
    weights.validate()?;
    let (r_ret, no_golden) = retrieval_reward(&trajectory.retrieved_doc_ids, &task.golden_doc_ids);
    let r_pat = pattern_reward(trajectory);
    let (r_ans, judge_transcript, mut flags) =
        outcome_reward(task, trajectory.final_answer(), judge)?;
    if no_golden {
        flags.push(RewardFlag::NoGolden);
    }
    let r_total = combine(r_ret, r_ans, r_pat, weights)?;
    Ok(RewardBreakdown {
        r_ret,
        r_ans,
        r_pat,
        r_total,
        judge_transcript,
        flags,
    })
}

/// Scores a batch. Judge calls fan out in parallel when the `parallel`
/// feature is on; result order always follows trajectory order.
pub fn score_batch(
    pairs: &[(&Trajectory, &QueryTask)],
    judge: &dyn JudgeClient,
    weights: &RewardWeights,
) -> Result<Vec<RewardBreakdown>, RewardError> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        pairs
            .par_iter()
            .map(|(t, task)| score_trajectory(t, task, judge, weights))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        pairs
            .iter()
            .map(|(t, task)| score_trajectory(t, task, judge, weights))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::Turn;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn golden(v: &[&str]) -> HashSet<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dcg_examples() {
        assert_eq!(dcg(&[]), 0.0);
        assert!((dcg(&[1, 0, 1]) - 1.5).abs() < 1e-12);
        assert!((dcg(&[0, 1]) - 1.0 / 3f64.log2()).abs() < 1e-12);
    }

    #[test]
    fn idcg_examples() {
        assert!((idcg(1) - 1.0).abs() < 1e-12);
        assert!((idcg(3) - (1.0 + 1.0 / 3f64.log2() + 0.5)).abs() < 1e-12);
        assert_eq!(idcg(0), 0.0);
    }

    #[test]
    fn retrieval_reward_examples() {
        let (r, flag) = retrieval_reward(&ids(&["g1"]), &golden(&["g1"]));
        assert!((r - 1.0).abs() < 1e-12);
        assert!(!flag);

        let (r, _) = retrieval_reward(&ids(&["x", "g1"]), &golden(&["g1"]));
        assert!((r - 1.0 / 3f64.log2()).abs() < 1e-12);

        let (r, _) = retrieval_reward(&ids(&["g1", "x", "g2"]), &golden(&["g1", "g2"]));
        let expected = (1.0 + 0.5) / (1.0 + 1.0 / 3f64.log2());
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 0.91972).abs() < 1e-5);
    }

    #[test]
    fn retrieval_reward_empty_golden_flags() {
        let (r, flag) = retrieval_reward(&ids(&["x"]), &golden(&[]));
        assert_eq!(r, 0.0);
        assert!(flag);
    }

    fn trajectory_with_raw_turns(raw: &[&str], reason: FinishReason) -> Trajectory {
        let mut t = Trajectory::new("t");
        for (i, r) in raw.iter().enumerate() {
            let parsed = parse_response(r);
            let mut turn = Turn::assistant(*r);
            turn.action = parsed.action;
            turn.thought = parsed.thought;
            t.append_turn(turn).unwrap();
            if i + 1 < raw.len() {
                t.append_turn(Turn::user_text("obs")).unwrap();
            }
        }
        t.finish(reason);
        t
    }

    #[test]
    fn pattern_reward_all_valid() {
        let t = trajectory_with_raw_turns(
            &[
                "<think>a</think><search>q</search>",
                "<think>b</think><search>r</search>",
                "<think>c</think><answer>x</answer>",
            ],
            FinishReason::Answered,
        );
        assert_eq!(pattern_reward(&t), 1.0);
    }

    #[test]
    fn pattern_reward_fraction() {
        let t = trajectory_with_raw_turns(
            &[
                "<think>a</think><search>q</search>",
                "no tags at all",
                "<think>c</think><search>r</search>",
                "<think>d</think><answer>x</answer>",
            ],
            FinishReason::Answered,
        );
        assert_eq!(pattern_reward(&t), 0.75);
    }

    #[test]
    fn pattern_reward_zero_without_answer() {
        let t = trajectory_with_raw_turns(
            &["<think>a</think><search>q</search>"],
            FinishReason::BudgetExhausted,
        );
        assert_eq!(pattern_reward(&t), 0.0);
    }

    struct ScriptedJudge {
        responses: Vec<String>,
        calls: AtomicU32,
    }

    impl ScriptedJudge {
        fn new(responses: &[&str]) -> Self {
            ScriptedJudge {
                responses: responses.iter().map(|s| s.to_string()).collect(),
                calls: AtomicU32::new(0),
            }
        }
    }

    impl JudgeClient for ScriptedJudge {
        fn evaluate(&self, _: &str, _: &str, _: &str) -> Result<String, ChatError> {
            let i = self.calls.fetch_add(1, Ordering::SeqCst) as usize;
            Ok(self
                .responses
                .get(i.min(self.responses.len() - 1))
                .cloned()
                .unwrap())
        }
    }

    fn task() -> QueryTask {
        QueryTask {
            id: "t".into(),
            question: "q?".into(),
            golden_answer: "42".into(),
            golden_doc_ids: golden(&["g1"]),
            corpus_id: "c".into(),
            answer_only: false,
        }
    }

    #[test]
    fn outcome_true_false() {
        let judge = ScriptedJudge::new(&["<judge>True</judge>"]);
        let (r, _, flags) = outcome_reward(&task(), Some("42"), &judge).unwrap();
        assert_eq!(r, 1.0);
        assert!(flags.is_empty());

        let judge = ScriptedJudge::new(&["<judge>False</judge>"]);
        let (r, _, _) = outcome_reward(&task(), Some("41"), &judge).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn outcome_unparseable_after_retries() {
        let judge = ScriptedJudge::new(&["no tag", "still none", "nope"]);
        let (r, transcript, flags) = outcome_reward(&task(), Some("42"), &judge).unwrap();
        assert_eq!(r, 0.0);
        assert_eq!(flags, vec![RewardFlag::JudgeUnparseable]);
        assert_eq!(transcript.as_deref(), Some("nope"));
        assert_eq!(judge.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn outcome_recovers_on_retry() {
        let judge = ScriptedJudge::new(&["garbage", "<judge>true</judge>"]);
        let (r, _, flags) = outcome_reward(&task(), Some("42"), &judge).unwrap();
        assert_eq!(r, 1.0);
        assert!(flags.is_empty());
        assert_eq!(judge.calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn outcome_no_answer_skips_judge() {
        let judge = ScriptedJudge::new(&["<judge>True</judge>"]);
        let (r, transcript, _) = outcome_reward(&task(), None, &judge).unwrap();
        assert_eq!(r, 0.0);
        assert!(transcript.is_none());
        assert_eq!(judge.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn combine_examples() {
        let w = RewardWeights::post_sft();
        assert!((combine(1.0, 1.0, 1.0, &w).unwrap() - 1.0).abs() < 1e-12);

        let cold = RewardWeights::cold_start();
        assert!((combine(1.0, 0.0, 1.0, &cold).unwrap() - 0.55).abs() < 1e-12);

        let bad = RewardWeights {
            alpha: 0.3,
            beta: 0.3,
            gamma: 0.3,
        };
        assert!(matches!(
            combine(1.0, 1.0, 1.0, &bad),
            Err(RewardError::InvalidWeights { .. })
        ));
    }

    #[test]
    fn combine_is_linear_in_components() {
        let w = RewardWeights {
            alpha: 0.2,
            beta: 0.5,
            gamma: 0.3,
        };
        let r = combine(0.4, 1.0, 0.5, &w).unwrap();
        assert!((r - (0.2 * 0.4 + 0.5 * 1.0 + 0.3 * 0.5)).abs() < 1e-12);
        // zero weight removes the component exactly
        let w0 = RewardWeights {
            alpha: 0.0,
            beta: 0.7,
            gamma: 0.3,
        };
        assert_eq!(
            combine(0.123, 1.0, 0.5, &w0).unwrap(),
            combine(0.999, 1.0, 0.5, &w0).unwrap()
        );
    }

    #[test]
    fn prefix_monotonicity_moving_relevant_earlier() {
        // moving a relevant doc one position earlier never decreases r_ret
        let g = golden(&["g1", "g2"]);
        let seqs = [
            ids(&["x", "g1", "y", "g2"]),
            ids(&["g1", "x", "y", "g2"]),
            ids(&["g1", "x", "g2", "y"]),
            ids(&["g1", "g2", "x", "y"]),
        ];
        let mut prev = -1.0;
        for s in &seqs {
            let (r, _) = retrieval_reward(s, &g);
            assert!(r >= prev);
            prev = r;
        }
    }
}
