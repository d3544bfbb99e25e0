use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    BackendConfig, BackendError, BackendKind, CharsPerToken, ChatBackend, CompletionResult, Pricing,
    SamplingParams, Usage,
};
use crate::prompting::Conversation;

const BODY_EXCERPT: usize = 512;
const DEFAULT_RETRY_AFTER: Duration = Duration::from_secs(1);

/// Append-only record-lines log of request and response bodies.
#[derive(Debug)]
pub struct TranscriptLog {
    out: Mutex<BufWriter<File>>,
}

impl TranscriptLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(TranscriptLog {
            out: Mutex::new(BufWriter::new(file)),
        })
    }

    pub fn record(&self, entry: &Value) -> std::io::Result<()> {
        let mut out = self.out.lock().unwrap_or_else(|e| e.into_inner());
        serde_json::to_writer(&mut *out, entry)?;
        out.write_all(b"\n")?;
        out.flush()
    }
}

/// Client for any endpoint speaking the chat-completions JSON protocol,
/// hosted or local.
#[derive(Debug)]
pub struct ChatApiBackend {
    endpoint: String,
    model_name: String,
    api_key: Option<String>,
    pricing: Pricing,
    timeout: Duration,
    client: reqwest::blocking::Client,
    blocked_until: Mutex<Option<Instant>>,
    transcript: Option<TranscriptLog>,
}

#[derive(Deserialize)]
struct ResponseBody {
    choices: Vec<Choice>,
    usage: Option<ReportedUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ReportedUsage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

fn excerpt(body: &str) -> String {
    body.chars().take(BODY_EXCERPT).collect()
}

impl ChatApiBackend {
    /// Build from config, reading the API key from the named environment
    /// variable when one is configured.
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        if cfg.kind != BackendKind::RemoteChatApi {
            return Err(BackendError::Config(format!(
                "expected a remote backend, got {}",
                cfg.kind
            )));
        }
        cfg.validate()?;
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| BackendError::MissingCredentials(var.clone()))?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.request_timeout())
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(ChatApiBackend {
            endpoint: cfg.endpoint.clone().unwrap_or_default(),
            model_name: cfg.model_name.clone(),
            api_key,
            pricing: cfg.pricing,
            timeout: cfg.request_timeout(),
            client,
            blocked_until: Mutex::new(None),
            transcript: None,
        })
    }

    pub fn with_transcript(mut self, log: TranscriptLog) -> Self {
        self.transcript = Some(log);
        self
    }

    pub fn request_body(&self, conv: &Conversation, params: &SamplingParams) -> Value {
        let messages: Vec<Value> = conv
            .messages()
            .into_iter()
            .map(|m| json!({ "role": m.role, "content": m.content }))
            .collect();
        json!({
            "model": self.model_name,
            "messages": messages,
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_output_tokens,
        })
    }

    fn wait_for_rate_limit(&self) {
        let until = *self.blocked_until.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(until) = until {
            let now = Instant::now();
            if until > now {
                std::thread::sleep(until - now);
            }
        }
    }

    fn note_rate_limit(&self, retry_after: Duration) {
        let mut guard = self.blocked_until.lock().unwrap_or_else(|e| e.into_inner());
        let until = Instant::now() + retry_after;
        if guard.is_none_or(|g| g < until) {
            *guard = Some(until);
        }
    }

    fn log(&self, request: &Value, status: Option<u16>, response: &str) {
        if let Some(t) = &self.transcript {
            let entry = json!({ "request": request, "status": status, "response": response });
            if let Err(e) = t.record(&entry) {
                log::warn!("failed to write transcript: {e}");
            }
        }
    }
}

impl ChatBackend for ChatApiBackend {
    fn complete(
        &self,
        conv: &Conversation,
        params: &SamplingParams,
    ) -> Result<CompletionResult, BackendError> {
        params.validate()?;
        let url = reqwest::Url::parse(&self.endpoint).map_err(|e| BackendError::Protocol {
            status: None,
            body: format!("invalid endpoint {:?}: {e}", self.endpoint),
        })?;
        let body = self.request_body(conv, params);
        self.wait_for_rate_limit();

        let started = Instant::now();
        let mut req = self.client.post(url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout(self.timeout)
            } else if e.is_builder() {
                BackendError::Protocol {
                    status: None,
                    body: e.to_string(),
                }
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let status = resp.status();
        let retry_after = resp
            .headers()
            .get(reqwest::header::RETRY_AFTER)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse::<f64>().ok())
            .map(Duration::from_secs_f64);
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout(self.timeout)
            } else {
                BackendError::Transport(e.to_string())
            }
        })?;
        let latency = started.elapsed();
        self.log(&body, Some(status.as_u16()), &text);

        if status.as_u16() == 429 {
            let retry_after = retry_after.unwrap_or(DEFAULT_RETRY_AFTER);
            self.note_rate_limit(retry_after);
            return Err(BackendError::RateLimited { retry_after });
        }
        if !status.is_success() {
            return Err(BackendError::Protocol {
                status: Some(status.as_u16()),
                body: excerpt(&text),
            });
        }

        let parsed: ResponseBody = serde_json::from_str(&text).map_err(|e| BackendError::Protocol {
            status: Some(status.as_u16()),
            body: format!("unreadable response ({e}): {}", excerpt(&text)),
        })?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Protocol {
                status: Some(status.as_u16()),
                body: format!("response has no message content: {}", excerpt(&text)),
            })?;
        let usage = match parsed.usage {
            Some(ReportedUsage {
                prompt_tokens: Some(i),
                completion_tokens: Some(o),
            }) => Usage::reported(i, o),
            _ => Usage::estimated(conv, &content, &CharsPerToken::default()),
        };
        Ok(CompletionResult {
            text: content,
            usage,
            latency,
        })
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn pricing(&self) -> Pricing {
        self.pricing
    }
}
