//! Querying vision-language models.
//!
//! [`VqaModel`] is the uniform interface: given an item and its (possibly
//! watermarked) image, return the model's raw reply. [`HttpModel`] speaks the
//! chat-completions JSON schema; [`MockModel`] is a deterministic offline stand-in.

mod http;
mod mock;

pub use http::{HttpModel, RateLimiter};
pub use mock::{mock_oracle, wrong_answer, MockBehavior, MockModel, Region};

use serde::{Deserialize, Serialize};

use crate::corpus::{DocumentImage, OptionLetter, VqaItem};

/// Bumped whenever [`build_prompt`] changes so cached replies are invalidated.
pub const PROMPT_TEMPLATE_VERSION: &str = "v1";

/// How to reach a model over HTTP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelEndpoint {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the API key. The key itself is never
    /// stored in configuration.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    /// First retry delay; doubles on every further attempt.
    #[serde(default = "default_backoff")]
    pub backoff_base_ms: u64,
    #[serde(default)]
    pub requests_per_second: Option<f64>,
}

fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    4
}
fn default_backoff() -> u64 {
    500
}

impl ModelEndpoint {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        ModelEndpoint {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
            backoff_base_ms: default_backoff(),
            requests_per_second: None,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(format!("timeout must be positive, got {}", self.timeout_secs));
        }
        if self.max_in_flight == 0 {
            return Err("max_in_flight must be at least 1".into());
        }
        if let Some(rps) = self.requests_per_second {
            if !(rps > 0.0 && rps.is_finite()) {
                return Err(format!("requests_per_second must be positive, got {rps}"));
            }
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(format!("base_url must be http(s), got {:?}", self.base_url));
        }
        Ok(())
    }
}

/// A model's answer to one item under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReply {
    pub item_id: String,
    pub condition_id: String,
    /// Verbatim reply text.
    pub raw_text: String,
    pub latency_secs: f64,
    pub attempt_count: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QueryError {
    /// The request could not be completed; the item is recorded as unanswered and the
    /// run continues.
    #[error("unanswered after {attempts} attempt(s): {reason}")]
    Unanswered { attempts: u32, reason: String },
    /// Credentials were rejected; the run must stop.
    #[error("authentication failed: {0}")]
    Auth(String),
    /// The model asked the run to stop (e.g. a query budget was exhausted).
    #[error("run aborted: {0}")]
    Aborted(String),
}

impl QueryError {
    pub fn is_fatal(&self) -> bool {
        !matches!(self, QueryError::Unanswered { .. })
    }
}

pub trait VqaModel: Send + Sync {
    fn model_name(&self) -> &str;

    fn query(
        &self,
        item: &VqaItem,
        image: &DocumentImage,
        condition_id: &str,
    ) -> Result<ModelReply, QueryError>;
}

/// The prompt sent with every image: question, lettered options, answer instruction.
pub fn build_prompt(item: &VqaItem) -> String {
    let mut out = String::new();
    out.push_str(item.question.trim_end());
    out.push('\n');
    for letter in OptionLetter::ALL {
        let text = item.options.get(&letter).map(String::as_str).unwrap_or("");
        out.push_str(&format!("{letter}. {text}\n"));
    }
    let noun = if item.category.is_multiple_response() {
        "letters"
    } else {
        "letter"
    };
    out.push_str(&format!("Answer with the option {noun} only."));
    out
}
