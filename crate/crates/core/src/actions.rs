//! The tagged action grammar.
//!
//! Policies emit their reasoning and exactly one action per turn as tagged
//! spans: `<think>…</think>` followed by one of `<search>…</search>`,
//! `<region>…</region>` (alias `<bbox>…</bbox>`), or `<answer>…</answer>`.
//! The tag vocabulary is a frozen wire contract; see docs/action_grammar.md
//! for the grammar.
//!
//! Parsing never fails: every malformation is recorded as a violation code
//! on the [`ParsedResponse`], and an action is extracted whenever exactly
//! one action tag parses cleanly.

use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

/// An action emitted by the policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    Search {
        query: String,
    },
    Region {
        /// `[x_min, y_min, x_max, y_max]` in the coordinate space of the
        /// targeted encoded view.
        bbox: [i32; 4],
        /// 1-based index into the image observations of the trajectory;
        /// absent means "most recent image observation".
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target_index: Option<u32>,
    },
    Answer {
        text: String,
    },
}

/// Why a response failed pattern validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    MissingThink,
    NoAction,
    MultipleActions,
    UnclosedTag,
    MalformedBbox,
    DegenerateBbox,
    EmptyQuery,
}

/// Result of parsing one assistant response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedResponse {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    pub pattern_valid: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub violations: Vec<Violation>,
}

const ACTION_TAGS: [&str; 4] = ["search", "region", "bbox", "answer"];
const ALL_TAGS: [&str; 6] = ["think", "search", "region", "bbox", "answer", "judge"];

fn span_regex(tag: &str) -> Regex {
    Regex::new(&format!(r"(?s)<{tag}>(.*?)</{tag}>")).expect("valid tag regex")
}

fn regexes() -> &'static [(String, Regex)] {
    static CELL: OnceLock<Vec<(String, Regex)>> = OnceLock::new();
    CELL.get_or_init(|| {
        ALL_TAGS
            .iter()
            .map(|t| (t.to_string(), span_regex(t)))
            .collect()
    })
}

fn spans<'a>(raw: &'a str, tag: &str) -> Vec<(usize, &'a str)> {
    let re = &regexes()
        .iter()
        .find(|(t, _)| t == tag)
        .expect("known tag")
        .1;
    re.captures_iter(raw)
        .map(|c| {
            let m = c.get(1).unwrap();
            (m.start(), m.as_str())
        })
        .collect()
}

fn has_unclosed(raw: &str, tag: &str) -> bool {
    let open = raw.matches(&format!("<{tag}>")).count();
    let close = raw.matches(&format!("</{tag}>")).count();
    open != close
}

/// Parses one full assistant response into thought, action, and violations.
pub fn parse_response(raw: &str) -> ParsedResponse {
    let mut violations = Vec::new();

    for tag in ALL_TAGS {
        if has_unclosed(raw, tag) {
            violations.push(Violation::UnclosedTag);
            break;
        }
    }

    let thought = spans(raw, "think")
        .first()
        .map(|(_, s)| s.trim().to_string());
    if thought.is_none() {
        violations.push(Violation::MissingThink);
    }

    // collect complete action spans in order of appearance
    let mut actions: Vec<(usize, &str, &str)> = Vec::new();
    for tag in ACTION_TAGS {
        for (pos, payload) in spans(raw, tag) {
            actions.push((pos, tag, payload));
        }
    }
    actions.sort_by_key(|(pos, _, _)| *pos);

    let action = match actions.len() {
        0 => {
            violations.push(Violation::NoAction);
            None
        }
        1 => {
            let (_, tag, payload) = actions[0];
            parse_action_payload(tag, payload, &mut violations)
        }
        _ => {
            violations.push(Violation::MultipleActions);
            None
        }
    };

    ParsedResponse {
        thought,
        pattern_valid: violations.is_empty(),
        action,
        violations,
    }
}

fn parse_action_payload(
    tag: &str,
    payload: &str,
    violations: &mut Vec<Violation>,
) -> Option<Action> {
    match tag {
        "search" => {
            let query = payload.trim();
            if query.is_empty() {
                violations.push(Violation::EmptyQuery);
                None
            } else {
                Some(Action::Search {
                    query: query.to_string(),
                })
            }
        }
        "answer" => Some(Action::Answer {
            text: payload.trim().to_string(),
        }),
        "region" | "bbox" => parse_bbox_payload(payload, violations),
        _ => unreachable!("not an action tag"),
    }
}

/// Bbox payload: optional `image <k>:` prefix selecting an earlier image
/// observation, then four integers with optional brackets and whitespace.
fn parse_bbox_payload(payload: &str, violations: &mut Vec<Violation>) -> Option<Action> {
    static PREFIX: OnceLock<Regex> = OnceLock::new();
    let prefix_re =
        PREFIX.get_or_init(|| Regex::new(r"^\s*image\s+(\d+)\s*:\s*").expect("prefix regex"));

    let mut rest = payload;
    let mut target_index = None;
    if let Some(c) = prefix_re.captures(rest) {
        match c[1].parse::<u32>() {
            Ok(idx) if idx >= 1 => target_index = Some(idx),
            _ => {
                violations.push(Violation::MalformedBbox);
                return None;
            }
        }
        rest = &rest[c.get(0).unwrap().end()..];
    }

    let trimmed = rest.trim();
    let inner = trimmed
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .unwrap_or(trimmed);
    let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
    if parts.len() != 4 {
        violations.push(Violation::MalformedBbox);
        return None;
    }
    let mut coords = [0i32; 4];
    for (slot, part) in coords.iter_mut().zip(&parts) {
        match part.parse::<i32>() {
            Ok(v) => *slot = v,
            Err(_) => {
                violations.push(Violation::MalformedBbox);
                return None;
            }
        }
    }
    if coords[0] >= coords[2] || coords[1] >= coords[3] {
        violations.push(Violation::DegenerateBbox);
        return None;
    }
    Some(Action::Region {
        bbox: coords,
        target_index,
    })
}

/// Renders an action back into its tagged text form. `<bbox>` inputs
/// canonicalize to `<region>` on output.
pub fn render_action(action: &Action) -> String {
    match action {
        Action::Search { query } => format!("<search>{query}</search>"),
        Action::Region { bbox, target_index } => {
            let coords = format!("[{}, {}, {}, {}]", bbox[0], bbox[1], bbox[2], bbox[3]);
            match target_index {
                Some(k) => format!("<region>image {k}: {coords}</region>"),
                None => format!("<region>{coords}</region>"),
            }
        }
        Action::Answer { text } => format!("<answer>{text}</answer>"),
    }
}

/// Renders a full pattern-valid assistant response.
pub fn render_response(thought: &str, action: &Action) -> String {
    format!("<think>{thought}</think>{}", render_action(action))
}
