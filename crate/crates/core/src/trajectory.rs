//! Tasks, turns, trajectories, and batch metrics.
//!
//! A [`Trajectory`] is the ordered record of one episode: assistant turns
//! carrying thought/action, interleaved with user turns carrying
//! observations (retrieved or cropped images, or corrective text). It also
//! tracks the first-occurrence ordered list of retrieved document ids that
//! the retrieval reward consumes.

use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::Action;

/// One retrieval-reason-answer task: a question over an image corpus with a
/// reference answer and the set of golden relevant documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTask {
    pub id: String,
    pub question: String,
    pub golden_answer: String,
    /// The golden relevant set. May be empty only for answer-only tasks.
    pub golden_doc_ids: HashSet<String>,
    pub corpus_id: String,
    #[serde(default)]
    pub answer_only: bool,
}

impl QueryTask {
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        if self.question.trim().is_empty() {
            return Err(TrajectoryError::InvalidTask("empty question".into()));
        }
        if self.golden_doc_ids.is_empty() && !self.answer_only {
            return Err(TrajectoryError::InvalidTask(
                "empty golden set on a task not flagged answer-only".into(),
            ));
        }
        Ok(())
    }
}

/// Message role. Observations always carry `User`; policy outputs always
/// carry `Assistant`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// Provenance of a cropped observation: which document it came from and the
/// raw-pixel box that was cut out. Kept as a sidecar record on the image
/// reference, never embedded in image metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropProvenance {
    pub source_doc: String,
    /// `[x_min, y_min, x_max, y_max]` in raw pixels.
    pub raw_box: [u32; 4],
}

/// Reference to an image payload by content hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRef {
    /// Hex SHA-256 of the encoded payload.
    pub hash: String,
    /// Document id, when the image is (a crop of) a corpus document.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<CropProvenance>,
}

impl ImageRef {
    /// A full retrieved document page.
    pub fn document(hash: impl Into<String>, doc_id: impl Into<String>) -> Self {
        ImageRef {
            hash: hash.into(),
            doc_id: Some(doc_id.into()),
            crop: None,
        }
    }
}

/// One turn of the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
}

impl Turn {
    pub fn assistant(text: impl Into<String>) -> Self {
        Turn {
            role: Role::Assistant,
            text: Some(text.into()),
            images: Vec::new(),
            thought: None,
            action: None,
        }
    }

    pub fn user_text(text: impl Into<String>) -> Self {
        Turn {
            role: Role::User,
            text: Some(text.into()),
            images: Vec::new(),
            thought: None,
            action: None,
        }
    }

    pub fn observation(text: Option<String>, images: Vec<ImageRef>) -> Self {
        Turn {
            role: Role::User,
            text,
            images,
            thought: None,
            action: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinishReason {
    Answered,
    BudgetExhausted,
    FatalError,
}

/// The episode record. Mutable only inside a single rollout worker; once
/// `finished` it is immutable and safe to share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub task_id: String,
    pub turns: Vec<Turn>,
    pub finished: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finish_reason: Option<FinishReason>,
    /// Retrieved document ids in first-occurrence order, duplicate-free.
    pub retrieved_doc_ids: Vec<String>,
    pub invalid_action_count: u32,
    /// Number of assistant turns carrying a parsed action.
    pub step_count: u32,
}

impl Trajectory {
    pub fn new(task_id: impl Into<String>) -> Self {
        Trajectory {
            task_id: task_id.into(),
            turns: Vec::new(),
            finished: false,
            finish_reason: None,
            retrieved_doc_ids: Vec::new(),
            invalid_action_count: 0,
            step_count: 0,
        }
    }

    /// Appends a turn, extending `retrieved_doc_ids` with any new document
    /// ids carried by the turn's observation images (first-occurrence order,
    /// duplicates skipped).
    pub fn append_turn(&mut self, turn: Turn) -> Result<(), TrajectoryError> {
        if self.finished {
            return Err(TrajectoryError::AppendToFinished);
        }
        for image in &turn.images {
            if let Some(doc_id) = &image.doc_id {
                // crops never re-register their source document
                if image.crop.is_none()
                    && !self.retrieved_doc_ids.iter().any(|d| d == doc_id)
                {
                    self.retrieved_doc_ids.push(doc_id.clone());
                }
            }
        }
        if turn.role == Role::Assistant && turn.action.is_some() {
            self.step_count += 1;
        }
        self.turns.push(turn);
        Ok(())
    }

    pub fn record_invalid_action(&mut self) {
        self.invalid_action_count += 1;
    }

    pub fn finish(&mut self, reason: FinishReason) {
        self.finished = true;
        self.finish_reason = Some(reason);
    }

    /// Number of assistant turns, i.e. action attempts (valid or not).
    pub fn action_attempts(&self) -> u32 {
        self.turns
            .iter()
            .filter(|t| t.role == Role::Assistant)
            .count() as u32
    }

    /// The final answer text, when the episode finished with an answer.
    pub fn final_answer(&self) -> Option<&str> {
        self.turns.iter().rev().find_map(|t| match &t.action {
            Some(Action::Answer { text }) => Some(text.as_str()),
            _ => None,
        })
    }

    /// Structural invariant check used by tests and the persistence layer.
    pub fn validate(&self) -> Result<(), TrajectoryError> {
        let mut seen = HashSet::new();
        for id in &self.retrieved_doc_ids {
            if !seen.insert(id) {
                return Err(TrajectoryError::Corrupt(format!(
                    "duplicate retrieved doc id {id}"
                )));
            }
        }
        for pair in self.turns.windows(2) {
            if pair[0].role == Role::Assistant && pair[1].role == Role::Assistant {
                return Err(TrajectoryError::Corrupt(
                    "consecutive assistant turns".into(),
                ));
            }
        }
        for turn in &self.turns {
            if turn.action.is_some() && turn.role != Role::Assistant {
                return Err(TrajectoryError::Corrupt(
                    "action on a non-assistant turn".into(),
                ));
            }
            if !turn.images.is_empty() && turn.role == Role::Assistant {
                return Err(TrajectoryError::Corrupt(
                    "images on an assistant turn".into(),
                ));
            }
        }
        if self.finish_reason == Some(FinishReason::Answered) {
            let last_action = self
                .turns
                .iter()
                .rev()
                .find(|t| t.role == Role::Assistant && t.action.is_some())
                .and_then(|t| t.action.as_ref());
            if !matches!(last_action, Some(Action::Answer { .. })) {
                return Err(TrajectoryError::Corrupt(
                    "finish reason Answered without a terminal answer action".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Interaction budget limits. Token budgets are character-estimate units;
/// exact enforcement happens at the model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Maximum number of assistant turns per episode.
    pub max_iterations: u32,
    pub max_prompt_tokens: u32,
    pub max_response_tokens: u32,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            max_iterations: 10,
            max_prompt_tokens: 8192,
            max_response_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BatchMetrics {
    /// Fraction of trajectories finishing with an answer.
    pub finish_rate: f64,
    /// Invalid actions over all action attempts.
    pub invalid_action_rate: f64,
    pub mean_steps: f64,
}

/// Aggregates operational metrics over a batch.
pub fn compute_metrics(trajectories: &[Trajectory]) -> Result<BatchMetrics, TrajectoryError> {
    if trajectories.is_empty() {
        return Err(TrajectoryError::EmptyBatch);
    }
    let n = trajectories.len() as f64;
    let answered = trajectories
        .iter()
        .filter(|t| t.finish_reason == Some(FinishReason::Answered))
        .count() as f64;
    let total_actions: u32 = trajectories.iter().map(|t| t.action_attempts()).sum();
    let total_invalid: u32 = trajectories.iter().map(|t| t.invalid_action_count).sum();
    let total_steps: u32 = trajectories.iter().map(|t| t.step_count).sum();
    Ok(BatchMetrics {
        finish_rate: answered / n,
        invalid_action_rate: if total_actions == 0 {
            0.0
        } else {
            f64::from(total_invalid) / f64::from(total_actions)
        },
        mean_steps: f64::from(total_steps) / n,
    })
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("cannot append to a finished trajectory")]
    AppendToFinished,
    #[error("empty trajectory batch")]
    EmptyBatch,
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("corrupt trajectory: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Writes trajectories as line-delimited JSON, one record per line.
/// The field names are the persistence contract (see docs/trajectory_format.md).
pub fn write_trajectories(path: &Path, trajectories: &[Trajectory]) -> Result<(), TrajectoryError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in trajectories {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a trajectory file, skipping corrupt lines. Returns the parsed
/// records and the number of lines skipped.
pub fn read_trajectories(path: &Path) -> Result<(Vec<Trajectory>, usize), TrajectoryError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    let mut skipped = 0;
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Trajectory>(&line) {
            Ok(t) => out.push(t),
            Err(e) => {
                log::warn!("skipping corrupt trajectory record: {e}");
                skipped += 1;
            }
        }
    }
    Ok((out, skipped))
}
