//! Chat backends: the HTTP chat-completions client, deterministic mocks, and
//! token/cost accounting shared by both.

mod http;
mod mock;
mod tokens;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::prompting::Conversation;

pub use http::{ChatApiBackend, TranscriptLog};
pub use mock::{scripted_mock, KeyedMock, ScriptedMock};
pub use tokens::{estimate_tokens, CharsPerToken, TokenEstimator, WhitespaceWords};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error{}: {body}", status.map(|s| format!(" (status {s})")).unwrap_or_default())]
    Protocol { status: Option<u16>, body: String },
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("rate limited; retry after {retry_after:?}")]
    RateLimited { retry_after: Duration },
    #[error("scripted mock exhausted after {0} responses")]
    ScriptExhausted(usize),
    #[error("missing credentials: environment variable {0} is not set")]
    MissingCredentials(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Whether re-sending the same request may succeed.
    pub fn is_transient(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout(_) | BackendError::RateLimited { .. } => true,
            BackendError::Protocol { status: Some(s), .. } => *s >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_output_tokens: u32,
}

impl SamplingParams {
    pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 256;

    pub fn new(temperature: f64, top_p: f64, max_output_tokens: u32) -> Self {
        SamplingParams {
            temperature,
            top_p,
            max_output_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(BackendError::Config(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::Config(format!(
                "top_p {} must be in (0, 1]",
                self.top_p
            )));
        }
        if self.max_output_tokens == 0 {
            return Err(BackendError::Config("max_output_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// USD per token.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    pub input_cost_per_token: f64,
    pub output_cost_per_token: f64,
}

impl Pricing {
    pub const LLAMA2_70B: Pricing = Pricing {
        input_cost_per_token: 0.0,
        output_cost_per_token: 0.0,
    };
    pub const GPT35_TURBO: Pricing = Pricing {
        input_cost_per_token: 1.5e-6,
        output_cost_per_token: 2e-6,
    };
    pub const GPT4: Pricing = Pricing {
        input_cost_per_token: 30e-6,
        output_cost_per_token: 60e-6,
    };

    /// Rates for a known model name, if any.
    pub fn for_model(model: &str) -> Option<Pricing> {
        let m = model.to_ascii_lowercase();
        if m.starts_with("gpt-4") {
            Some(Pricing::GPT4)
        } else if m.starts_with("gpt-3.5") {
            Some(Pricing::GPT35_TURBO)
        } else if m.contains("llama") {
            Some(Pricing::LLAMA2_70B)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UsageSource {
    #[default]
    Reported,
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub usage_source: UsageSource,
}

impl Usage {
    pub fn reported(input_tokens: u64, output_tokens: u64) -> Self {
        Usage {
            input_tokens,
            output_tokens,
            usage_source: UsageSource::Reported,
        }
    }

    /// Estimate both sides with `estimator`.
    pub fn estimated(conv: &Conversation, response: &str, estimator: &dyn TokenEstimator) -> Self {
        let input = conv
            .messages()
            .iter()
            .map(|m| estimator.estimate(&m.content) as u64)
            .sum();
        Usage {
            input_tokens: input,
            output_tokens: estimator.estimate(response) as u64,
            usage_source: UsageSource::Estimated,
        }
    }
}

/// Sum; the result is `Estimated` if either side was.
impl std::ops::Add for Usage {
    type Output = Usage;

    fn add(self, other: Usage) -> Usage {
        Usage {
            input_tokens: self.input_tokens + other.input_tokens,
            output_tokens: self.output_tokens + other.output_tokens,
            usage_source: if self.usage_source == UsageSource::Estimated
                || other.usage_source == UsageSource::Estimated
            {
                UsageSource::Estimated
            } else {
                UsageSource::Reported
            },
        }
    }
}

pub fn estimate_cost(usage: &Usage, pricing: &Pricing) -> f64 {
    usage.input_tokens as f64 * pricing.input_cost_per_token
        + usage.output_tokens as f64 * pricing.output_cost_per_token
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    pub usage: Usage,
    pub latency: Duration,
}

/// Anything that answers a conversation with the next assistant message.
///
/// Implementations must be shareable across threads; a single handle serves
/// every in-flight request of a batch.
pub trait ChatBackend: Send + Sync {
    fn complete(
        &self,
        conv: &Conversation,
        params: &SamplingParams,
    ) -> Result<CompletionResult, BackendError>;

    fn model_name(&self) -> &str;

    fn pricing(&self) -> Pricing {
        Pricing::default()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(
        &self,
        conv: &Conversation,
        params: &SamplingParams,
    ) -> Result<CompletionResult, BackendError> {
        (**self).complete(conv, params)
    }

    fn model_name(&self) -> &str {
        (**self).model_name()
    }

    fn pricing(&self) -> Pricing {
        (**self).pricing()
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(
        &self,
        conv: &Conversation,
        params: &SamplingParams,
    ) -> Result<CompletionResult, BackendError> {
        (**self).complete(conv, params)
    }

    fn model_name(&self) -> &str {
        (**self).model_name()
    }

    fn pricing(&self) -> Pricing {
        (**self).pricing()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    RemoteChatApi,
    ScriptedMock,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::RemoteChatApi => "remote-chat-api",
            BackendKind::ScriptedMock => "scripted-mock",
        })
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "remote-chat-api" | "remote" => Ok(BackendKind::RemoteChatApi),
            "scripted-mock" | "mock" => Ok(BackendKind::ScriptedMock),
            other => Err(format!("unknown backend kind {other:?}")),
        }
    }
}

/// Settings for a remote chat-completions endpoint. The API key is never
/// stored here, only the name of the environment variable holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    pub model_name: String,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub pricing: Pricing,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: f64,
    #[serde(default)]
    pub defaults: Option<SamplingParams>,
}

fn default_timeout_secs() -> f64 {
    60.0
}

impl BackendConfig {
    pub fn remote(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        let model_name = model_name.into();
        BackendConfig {
            kind: BackendKind::RemoteChatApi,
            endpoint: Some(endpoint.into()),
            pricing: Pricing::for_model(&model_name).unwrap_or_default(),
            model_name,
            api_key_env: None,
            request_timeout_secs: default_timeout_secs(),
            defaults: None,
        }
    }

    pub fn request_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout_secs.max(0.0))
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.pricing.input_cost_per_token < 0.0 || self.pricing.output_cost_per_token < 0.0 {
            return Err(BackendError::Config("pricing must be non-negative".into()));
        }
        if self.kind == BackendKind::RemoteChatApi && self.endpoint.is_none() {
            return Err(BackendError::Config("remote backend needs an endpoint".into()));
        }
        if let Some(d) = &self.defaults {
            d.validate()?;
        }
        Ok(())
    }
}
