//! Chat-completion wire types and a blocking HTTP client with retries.
//!
//! The judge, the remote policy, and the expert clients all speak the same
//! chat-completion-style protocol: a list of role-tagged messages with text
//! and/or image content, answered by a single text completion.

use serde::{Deserialize, Serialize};
use std::time::Duration;
use thiserror::Error;

use crate::trajectory::Role;

/// One content part of a chat message: plain text or an image reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ContentPart {
    Text { text: String },
    ImageUrl { url: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: vec![ContentPart::Text { text: text.into() }],
        }
    }

    /// Concatenated text parts, ignoring images.
    pub fn text_content(&self) -> String {
        self.content
            .iter()
            .filter_map(|p| match p {
                ContentPart::Text { text } => Some(text.as_str()),
                ContentPart::ImageUrl { .. } => None,
            })
            .collect::<Vec<_>>()
            .join("")
    }
}

/// Decoding parameters forwarded verbatim to the model endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl Default for DecodingParams {
    fn default() -> Self {
        DecodingParams {
            temperature: 1.0,
            top_p: 1.0,
            max_tokens: 2048,
        }
    }
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("endpoint unreachable after {attempts} attempts: {last}")]
    Unreachable { attempts: u32, last: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

/// Blocking chat-completion client. Retries transport errors and 5xx
/// responses up to `max_attempts` with a short linear backoff.
pub struct ChatClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
    pub max_attempts: u32,
}

impl ChatClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        ChatClient {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(120))
                .build()
                .expect("http client"),
            max_attempts: 3,
        }
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.http = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("http client");
        self
    }

    /// Sends the messages and returns the completion text.
    pub fn complete(
        &self,
        messages: &[ChatMessage],
        params: &DecodingParams,
    ) -> Result<String, ChatError> {
        let body = ChatRequest {
            model: &self.model,
            messages,
            temperature: params.temperature,
            top_p: params.top_p,
            max_tokens: params.max_tokens,
        };
        let mut last_err = String::new();
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(200 * attempt as u64));
            }
            let mut req = self.http.post(&self.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) if resp.status().is_server_error() => {
                    last_err = format!("server error {}", resp.status());
                }
                Ok(resp) if !resp.status().is_success() => {
                    // 4xx is not retriable
                    return Err(ChatError::MalformedResponse(format!(
                        "status {}",
                        resp.status()
                    )));
                }
                Ok(resp) => {
                    let text = resp
                        .text()
                        .map_err(|e| ChatError::MalformedResponse(e.to_string()))?;
                    let parsed: ChatResponse = serde_json::from_str(&text)
                        .map_err(|e| ChatError::MalformedResponse(e.to_string()))?;
                    return parsed
                        .choices
                        .into_iter()
                        .next()
                        .map(|c| c.message.content)
                        .ok_or_else(|| {
                            ChatError::MalformedResponse("empty choices".to_string())
                        });
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(ChatError::Unreachable {
            attempts: self.max_attempts,
            last: last_err,
        })
    }
}
