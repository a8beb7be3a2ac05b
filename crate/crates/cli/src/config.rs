//! Run configuration and run manifests.
//!
//! Effective configuration is resolved with the precedence
//! flags > environment variables > config file > defaults. Every command
//! writes a run manifest before producing any other output; the manifest
//! embeds the effective configuration so a run can be reproduced from it
//! verbatim (`--config run_manifest.json`).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use vrag_core::reward::RewardWeights;

pub const ENV_POLICY_URL: &str = "VRAG_POLICY_URL";
pub const ENV_JUDGE_URL: &str = "VRAG_JUDGE_URL";
pub const ENV_SEARCH_URL: &str = "VRAG_SEARCH_URL";
pub const ENV_API_KEY: &str = "VRAG_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsProfile {
    PostSft,
    ColdStart,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Path to a corpus manifest (corpus.json) for simulated retrieval.
    pub corpus: Option<PathBuf>,
    pub policy_endpoint: Option<String>,
    pub judge_endpoint: Option<String>,
    pub search_endpoint: Option<String>,
    pub weights_profile: WeightsProfile,
    /// Required when `weights_profile` is `custom`.
    pub custom_weights: Option<RewardWeights>,
    pub group_size: usize,
    pub max_steps: u32,
    pub no_judge: bool,
    pub seed: u64,
    pub out: PathBuf,
    /// train-toy knobs.
    pub updates: usize,
    pub learning_rate: f64,
    pub kl_coefficient: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            policy_endpoint: None,
            judge_endpoint: None,
            search_endpoint: None,
            weights_profile: WeightsProfile::PostSft,
            custom_weights: None,
            group_size: 5,
            max_steps: 10,
            no_judge: false,
            seed: 0,
            out: PathBuf::from("runs/out"),
            updates: 300,
            learning_rate: 0.5,
            kl_coefficient: 0.01,
        }
    }
}

impl RunConfig {
    pub fn weights(&self) -> Result<RewardWeights, CliError> {
        let weights = match self.weights_profile {
            WeightsProfile::PostSft => RewardWeights::post_sft(),
            WeightsProfile::ColdStart => RewardWeights::cold_start(),
            WeightsProfile::Custom => self.custom_weights.clone().ok_or_else(|| {
                CliError::Config(
                    "custom_weights: required when weights_profile is custom".to_string(),
                )
            })?,
        };
        weights
            .validate()
            .map_err(|e| CliError::Config(format!("weights: {e}")))?;
        Ok(weights)
    }

    /// Overlays environment variables onto this config.
    pub fn apply_env(&mut self) {
        if let Ok(v) = std::env::var(ENV_POLICY_URL) {
            self.policy_endpoint = Some(v);
        }
        if let Ok(v) = std::env::var(ENV_JUDGE_URL) {
            self.judge_endpoint = Some(v);
        }
        if let Ok(v) = std::env::var(ENV_SEARCH_URL) {
            self.search_endpoint = Some(v);
        }
    }

    pub fn api_key() -> Option<String> {
        std::env::var(ENV_API_KEY).ok()
    }
}

/// Written to the output directory before any other artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: RunConfig,
    pub config_sha256: String,
    pub prompt_template_sha256: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
            config_sha256: hex_sha256(serde_json::to_string(config).unwrap().as_bytes()),
            prompt_template_sha256: hex_sha256(vrag_core::rollout::SYSTEM_PROMPT.as_bytes()),
        }
    }

    /// Creates the output directory and writes the manifest into it.
    pub fn write(&self) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.config.out)
            .map_err(|e| CliError::Environment(format!("creating output directory: {e}")))?;
        let path = self.config.out.join("run_manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(self).unwrap())
            .map_err(|e| CliError::Environment(format!("writing run manifest: {e}")))?;
        Ok(path)
    }
}

/// Loads `--config` input: either a bare [`RunConfig`] or a previously
/// written [`RunManifest`] (detected by its `config` field).
pub fn load_config_file(path: &PathBuf) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))?;
    let config_value = value.get("config").cloned().unwrap_or(value);
    serde_json::from_value(config_value)
        .map_err(|e| CliError::Config(format!("config file {}: {e}", path.display())))
}

pub fn hex_sha256(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Command failures mapped to process exit codes: config errors exit 2,
/// environment and endpoint errors exit 3, quality-threshold failures
/// exit 4.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Environment(String),
    Quality(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Environment(_) => 3,
            CliError::Quality(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Environment(m) => write!(f, "environment error: {m}"),
            CliError::Quality(m) => write!(f, "quality threshold not met: {m}"),
        }
    }
}
