//! Per-instance classification with format retries, the summarize-then-classify
//! variant, and batch execution over a dataset.

mod batch;
mod cache;

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backend::{estimate_cost, BackendError, ChatBackend, CompletionResult, SamplingParams, Usage};
use crate::corpus::{ComparisonInstance, CorpusError, FewShotSet};
use crate::label::PreferenceLabel;
use crate::prompting::{
    build_conversation, build_retry_conversation, build_summary_conversation, parse_response,
    summary_retry_text, Conversation, ParseResult, PromptError, PromptTemplate,
};

pub use batch::{run_batch, BatchOptions, BatchResult, Execution, Shots};
pub use cache::{CacheKey, CacheKeyFields, OutcomeCache};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("cache i/o error: {0}")]
    Cache(#[from] std::io::Error),
    #[error("invalid batch options: {0}")]
    Options(String),
}

/// What to do when format retries run out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    /// Keep the label of the most recent response that contained exactly one
    /// canonical phrase.
    #[default]
    UseEmbeddedLabel,
    MarkUnparsable,
}

impl FromStr for Fallback {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "use-embedded-label" => Ok(Fallback::UseEmbeddedLabel),
            "mark-unparsable" => Ok(Fallback::MarkUnparsable),
            other => Err(format!("unknown fallback {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub fallback: Fallback,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            fallback: Fallback::UseEmbeddedLabel,
        }
    }
}

/// Backoff for failed requests. Independent of format retries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransientRetry {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for TransientRetry {
    fn default() -> Self {
        TransientRetry {
            max_retries: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl TransientRetry {
    pub fn none() -> Self {
        TransientRetry {
            max_retries: 0,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    pub fn delay_for(&self, attempt: u32, err: &BackendError) -> Duration {
        let backoff = self
            .base_delay
            .saturating_mul(1u32.checked_shl(attempt).unwrap_or(u32::MAX))
            .min(self.max_delay);
        match err {
            BackendError::RateLimited { retry_after } => backoff.max(*retry_after),
            _ => backoff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseStatus {
    Exact,
    EmbeddedFallback,
    Unparsable,
    /// The backend failed hard; no prediction was made.
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Summarize,
    Classify,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Summarize => "summarize",
            Stage::Classify => "classify",
        })
    }
}

/// One backend call: what was sent (by digest) and what came back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub stage: Stage,
    pub conversation_digest: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryStage {
    pub retry_count: u32,
    /// No valid summary was obtained; the original text was classified.
    pub fell_back: bool,
    pub summary: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub instance_id: String,
    pub predicted: Option<PreferenceLabel>,
    pub parse_status: ParseStatus,
    pub retry_count: u32,
    pub transcripts: Vec<Transcript>,
    pub usage_total: Usage,
    pub cost_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<SummaryStage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RunOutcome {
    pub fn failed(instance_id: impl Into<String>, error: impl fmt::Display) -> Self {
        RunOutcome {
            instance_id: instance_id.into(),
            predicted: None,
            parse_status: ParseStatus::Failed,
            retry_count: 0,
            transcripts: Vec::new(),
            usage_total: Usage::default(),
            cost_total: 0.0,
            summary: None,
            error: Some(error.to_string()),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.parse_status == ParseStatus::Failed
    }

    /// Number of backend calls this outcome accounts for.
    pub fn backend_calls(&self) -> usize {
        self.transcripts.len()
    }
}

/// Everything needed to classify instances against one backend.
pub struct Classifier<'a> {
    pub backend: &'a dyn ChatBackend,
    pub template: PromptTemplate,
    pub policy: RetryPolicy,
    pub params: SamplingParams,
    pub transient: TransientRetry,
}

impl<'a> Classifier<'a> {
    /// Uses the style's default sampling and the default retry policies.
    pub fn new(backend: &'a dyn ChatBackend, template: PromptTemplate) -> Self {
        Classifier {
            params: template.style.default_sampling(),
            backend,
            template,
            policy: RetryPolicy::default(),
            transient: TransientRetry::default(),
        }
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_params(mut self, params: SamplingParams) -> Self {
        self.params = params;
        self
    }

    pub fn with_transient(mut self, transient: TransientRetry) -> Self {
        self.transient = transient;
        self
    }

    fn call(&self, conv: &Conversation) -> Result<CompletionResult, BackendError> {
        let mut attempt = 0;
        loop {
            match self.backend.complete(conv, &self.params) {
                Ok(r) => return Ok(r),
                Err(e) if e.is_transient() && attempt < self.transient.max_retries => {
                    let delay = self.transient.delay_for(attempt, &e);
                    log::debug!("transient backend error ({e}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Ask, parse, and re-ask with the retry reminder until the response is
    /// exactly canonical or the retry budget is spent.
    pub fn classify_instance(
        &self,
        inst: &ComparisonInstance,
        fewshot: Option<&FewShotSet>,
    ) -> Result<RunOutcome, PipelineError> {
        let mut conv = build_conversation(&self.template, inst, fewshot)?;
        let mut transcripts = Vec::new();
        let mut usage = Usage::default();
        let mut retry_count = 0;
        let mut last_embedded = None;

        let (predicted, parse_status) = loop {
            let res = self.call(&conv)?;
            transcripts.push(Transcript {
                stage: Stage::Classify,
                conversation_digest: conv.digest(),
                response: res.text.clone(),
            });
            usage = usage + res.usage;
            match parse_response(&res.text, &self.template) {
                ParseResult::Exact(label) => break (Some(label), ParseStatus::Exact),
                ParseResult::Embedded(label) => last_embedded = Some(label),
                ParseResult::Malformed(_) => {}
            }
            if retry_count >= self.policy.max_retries {
                break match (self.policy.fallback, last_embedded) {
                    (Fallback::UseEmbeddedLabel, Some(label)) => (Some(label), ParseStatus::EmbeddedFallback),
                    _ => (None, ParseStatus::Unparsable),
                };
            }
            conv = build_retry_conversation(&conv, non_empty(&res.text), &self.template)?;
            retry_count += 1;
        };

        Ok(RunOutcome {
            instance_id: inst.id.clone(),
            predicted,
            parse_status,
            retry_count,
            transcripts,
            cost_total: estimate_cost(&usage, &self.backend.pricing()),
            usage_total: usage,
            summary: None,
            error: None,
        })
    }

    /// Summarize first, then classify the summary. A summary must name both
    /// alternatives verbatim; if no valid summary is produced within the
    /// retry budget the original text is classified instead.
    pub fn summarize_then_classify(
        &self,
        inst: &ComparisonInstance,
        fewshot: Option<&FewShotSet>,
    ) -> Result<RunOutcome, PipelineError> {
        let mut conv = build_summary_conversation(inst)?;
        let mut transcripts = Vec::new();
        let mut usage = Usage::default();
        let mut retry_count = 0;

        let summary = loop {
            let res = self.call(&conv)?;
            transcripts.push(Transcript {
                stage: Stage::Summarize,
                conversation_digest: conv.digest(),
                response: res.text.clone(),
            });
            usage = usage + res.usage;
            let text = res.text.trim();
            if !text.is_empty() && text.contains(&inst.alternative_a) && text.contains(&inst.alternative_b) {
                break Some(text.to_string());
            }
            if retry_count >= self.policy.max_retries {
                break None;
            }
            conv = conv.with_retry(non_empty(&res.text), summary_retry_text())?;
            retry_count += 1;
        };

        let mut outcome = match &summary {
            Some(s) => {
                let mut condensed = inst.clone();
                condensed.text = s.clone();
                self.classify_instance(&condensed, fewshot)?
            }
            None => self.classify_instance(inst, fewshot)?,
        };
        transcripts.append(&mut outcome.transcripts);
        outcome.transcripts = transcripts;
        outcome.usage_total = usage + outcome.usage_total;
        outcome.cost_total = estimate_cost(&outcome.usage_total, &self.backend.pricing());
        outcome.summary = Some(SummaryStage {
            retry_count,
            fell_back: summary.is_none(),
            summary,
        });
        Ok(outcome)
    }
}

fn non_empty(s: &str) -> &str {
    if s.is_empty() {
        "(empty response)"
    } else {
        s
    }
}

pub fn classify_instance(
    backend: &dyn ChatBackend,
    template: &PromptTemplate,
    inst: &ComparisonInstance,
    fewshot: Option<&FewShotSet>,
    policy: RetryPolicy,
    params: SamplingParams,
) -> Result<RunOutcome, PipelineError> {
    Classifier::new(backend, template.clone())
        .with_policy(policy)
        .with_params(params)
        .classify_instance(inst, fewshot)
}

pub fn summarize_then_classify(
    backend: &dyn ChatBackend,
    template: &PromptTemplate,
    inst: &ComparisonInstance,
    policy: RetryPolicy,
    params: SamplingParams,
) -> Result<RunOutcome, PipelineError> {
    Classifier::new(backend, template.clone())
        .with_policy(policy)
        .with_params(params)
        .summarize_then_classify(inst, None)
}
