//! Rationale orchestration: prompts an LLM backend for an initial
//! rationale per item, has the backend review its own rationale for
//! validity, regenerates rationales judged ineffective, captions every
//! image, and persists the per-item state idempotently.

mod backend;
mod pipeline;
mod prompts;
mod store;

pub use backend::{make_backend, HttpBackend, LlmBackend, MockBackend, TranscriptEntry};
pub use pipeline::{
    follow_up_review, generate_caption, generate_initial_rationale, run_pipeline, PipelineFailure,
    PipelineOptions, PipelineReport,
};
pub use prompts::{build_prompt, PromptTemplates, INITIAL_FRAGMENT, VALIDITY_FRAGMENT};
pub use store::RecordStore;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {source}")]
    ParseAt {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error("template for stage {stage} is missing required text: {needs}")]
    BadTemplate { stage: Stage, needs: String },
    #[error("followup prompt for item '{item_id}' requires a prior rationale")]
    MissingPrior { item_id: String },
    #[error("no transcript entry for stage {stage}, item '{item_id}'")]
    MissingEntry { stage: Stage, item_id: String },
    #[error("api key environment variable '{var}' is not set")]
    MissingApiKey { var: String },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("empty backend response at stage {stage} for item '{item_id}'")]
    EmptyResponse { stage: Stage, item_id: String },
    #[error("no parsable verdict for item '{item_id}' after {attempts} attempt(s)")]
    UnresolvedVerdict { item_id: String, attempts: u32 },
    #[error("item '{item_id}' has no initial rationale to review")]
    MissingInitial { item_id: String },
    #[error("{0} item(s) left unresolved:\n{1}")]
    Pipeline(usize, String),
    #[error("serializing record: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Pipeline stage, also the key space for mock transcripts. `Regen` is the
/// second backend call made for a rationale judged ineffective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initial,
    Followup,
    Regen,
    Caption,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Stage::Initial => "initial",
            Stage::Followup => "followup",
            Stage::Regen => "regen",
            Stage::Caption => "caption",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Effective,
    Ineffective,
    Unresolved,
}

/// Per-item orchestration state.
///
/// Invariants maintained by the pipeline: verdict Effective implies
/// `followup_rationale` is byte-identical to `initial_rationale`; verdict
/// Ineffective implies `followup_rationale` is non-empty regenerated text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RationaleRecord {
    pub item_id: String,
    pub initial_rationale: String,
    pub verdict: Verdict,
    pub followup_rationale: String,
    pub caption: String,
    pub attempt_count: u32,
}

impl RationaleRecord {
    pub fn fresh(item_id: impl Into<String>) -> Self {
        RationaleRecord {
            item_id: item_id.into(),
            initial_rationale: String::new(),
            verdict: Verdict::Unresolved,
            followup_rationale: String::new(),
            caption: String::new(),
            attempt_count: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Http,
}

/// How to reach the language model. `mock` replays a transcript file;
/// `http` posts prompts to a JSON endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub transcript: Option<PathBuf>,
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_timeout() -> u64 {
    30
}
fn default_retries() -> u32 {
    2
}
fn default_backoff() -> u64 {
    50
}

impl BackendConfig {
    pub fn mock(transcript: impl Into<PathBuf>) -> Self {
        BackendConfig {
            kind: BackendKind::Mock,
            endpoint: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            api_key_env: None,
            transcript: Some(transcript.into()),
            strict: false,
            backoff_ms: default_backoff(),
        }
    }

    pub fn http(endpoint: impl Into<String>) -> Self {
        BackendConfig {
            kind: BackendKind::Http,
            endpoint: Some(endpoint.into()),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            api_key_env: None,
            transcript: None,
            strict: false,
            backoff_ms: default_backoff(),
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        match self.kind {
            BackendKind::Http if self.endpoint.is_none() => Err(OrchestratorError::Config(
                "http backend requires an endpoint".into(),
            )),
            BackendKind::Mock if self.transcript.is_none() => Err(OrchestratorError::Config(
                "mock backend requires a transcript path".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_requires_kind_specific_fields() {
        assert!(BackendConfig::mock("t.jsonl").validate().is_ok());
        assert!(BackendConfig::http("http://localhost:1").validate().is_ok());

        let mut broken = BackendConfig::http("x");
        broken.endpoint = None;
        assert!(matches!(
            broken.validate(),
            Err(OrchestratorError::Config(_))
        ));

        let mut broken = BackendConfig::mock("t.jsonl");
        broken.transcript = None;
        assert!(matches!(
            broken.validate(),
            Err(OrchestratorError::Config(_))
        ));
    }

    #[test]
    fn record_serialization_round_trips() {
        let rec = RationaleRecord {
            item_id: "a".into(),
            initial_rationale: "r1".into(),
            verdict: Verdict::Effective,
            followup_rationale: "r1".into(),
            caption: "cap".into(),
            attempt_count: 2,
        };
        let line = serde_json::to_string(&rec).unwrap();
        assert!(line.contains("\"verdict\":\"effective\""));
        let back: RationaleRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);
    }
}
