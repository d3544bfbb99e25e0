//! Deterministic stand-ins for a chat model.
//!
//! [`ScriptedMock`] answers successive calls with successive script entries,
//! no matter what it is asked, and records every conversation it receives.
//! Calls are serialized so script order is call order.
//!
//! [`KeyedMock`] answers by content: each instance text owns its own script,
//! indexed by how many retries the conversation already contains. It keeps no
//! per-call state, so it gives identical answers under any scheduling.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::{BackendError, CharsPerToken, ChatBackend, CompletionResult, Pricing, SamplingParams, Usage};
use crate::prompting::Conversation;

#[derive(Debug, Default)]
struct ScriptState {
    next: usize,
    recorded: Vec<Conversation>,
}

#[derive(Debug)]
pub struct ScriptedMock {
    script: Vec<String>,
    delay: Option<Duration>,
    model_name: String,
    pricing: Pricing,
    state: Mutex<ScriptState>,
}

/// A mock answering calls from `script` in order.
pub fn scripted_mock(script: Vec<String>, delay: Option<Duration>) -> Result<ScriptedMock, BackendError> {
    if script.is_empty() {
        return Err(BackendError::Config(
            "scripted mock needs at least one response".into(),
        ));
    }
    Ok(ScriptedMock {
        script,
        delay,
        model_name: "scripted-mock".to_string(),
        pricing: Pricing::default(),
        state: Mutex::new(ScriptState::default()),
    })
}

impl ScriptedMock {
    /// Panics on an empty script.
    pub fn new<S: Into<String>>(script: impl IntoIterator<Item = S>) -> Self {
        scripted_mock(script.into_iter().map(Into::into).collect(), None).expect("non-empty script")
    }

    pub fn with_model_name(mut self, name: impl Into<String>) -> Self {
        self.model_name = name.into();
        self
    }

    pub fn with_pricing(mut self, pricing: Pricing) -> Self {
        self.pricing = pricing;
        self
    }

    pub fn recorded(&self) -> Vec<Conversation> {
        self.state
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .recorded
            .clone()
    }

    pub fn calls(&self) -> usize {
        self.state
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .recorded
            .len()
    }
}

impl ChatBackend for ScriptedMock {
    fn complete(
        &self,
        conv: &Conversation,
        _params: &SamplingParams,
    ) -> Result<CompletionResult, BackendError> {
        let started = Instant::now();
        let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        state.recorded.push(conv.clone());
        let idx = state.next;
        let text = self
            .script
            .get(idx)
            .cloned()
            .ok_or(BackendError::ScriptExhausted(self.script.len()))?;
        state.next += 1;
        Ok(CompletionResult {
            usage: Usage::estimated(conv, &text, &CharsPerToken::default()),
            text,
            latency: started.elapsed(),
        })
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn pricing(&self) -> Pricing {
        self.pricing
    }
}

#[derive(Debug, Default)]
pub struct KeyedMock {
    scripts: HashMap<String, Vec<String>>,
    errors: HashMap<String, BackendError>,
    default_response: Option<String>,
    delay: Option<Duration>,
    model_name: String,
    pricing: Pricing,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
}

impl KeyedMock {
    pub fn new() -> Self {
        KeyedMock {
            model_name: "keyed-mock".to_string(),
            ..Default::default()
        }
    }

    /// Responses for the conversation whose task message contains `text`;
    /// the n-th entry answers the (n-1)-th retry.
    pub fn script<S: Into<String>>(
        mut self,
        text: impl Into<String>,
        responses: impl IntoIterator<Item = S>,
    ) -> Self {
        self.insert_script(text, responses);
        self
    }

    pub fn insert_script<S: Into<String>>(
        &mut self,
        text: impl Into<String>,
        responses: impl IntoIterator<Item = S>,
    ) {
        self.scripts
            .insert(text.into(), responses.into_iter().map(Into::into).collect());
    }

    /// Every call for `text` fails with `err`.
    pub fn fail(mut self, text: impl Into<String>, err: BackendError) -> Self {
        self.errors.insert(text.into(), err);
        self
    }

    /// Answer used for unscripted conversations.
    pub fn with_default(mut self, response: impl Into<String>) -> Self {
        self.default_response = Some(response.into());
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    pub fn with_model_name(mut self, name: impl Into<String>) -> Self {
        self.model_name = name.into();
        self
    }

    pub fn with_pricing(mut self, pricing: Pricing) -> Self {
        self.pricing = pricing;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest number of simultaneous `complete` calls observed.
    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    fn longest_key_in<'a, V>(map: &'a HashMap<String, V>, message: &str) -> Option<&'a str> {
        map.keys()
            .filter(|k| !k.is_empty() && message.contains(k.as_str()))
            .max_by(|a, b| a.len().cmp(&b.len()).then_with(|| b.cmp(a)))
            .map(String::as_str)
    }

    /// Locate the task message: the latest user message mentioning a known
    /// key. Returns the key and how many turns follow it.
    fn locate(&self, conv: &Conversation) -> Option<(&str, usize)> {
        let history = conv.history();
        let users = std::iter::once((0usize, conv.final_user()))
            .chain(history.iter().rev().enumerate().map(|(i, (u, _))| (i + 1, u)));
        for (turns_after, msg) in users {
            let key = Self::longest_key_in(&self.scripts, &msg.content)
                .or_else(|| Self::longest_key_in(&self.errors, &msg.content));
            if let Some(key) = key {
                return Some((key, turns_after));
            }
        }
        None
    }

    fn respond(&self, conv: &Conversation) -> Result<String, BackendError> {
        match self.locate(conv) {
            Some((key, position)) => {
                if let Some(err) = self.errors.get(key) {
                    return Err(err.clone());
                }
                let script = &self.scripts[key];
                script
                    .get(position)
                    .cloned()
                    .ok_or(BackendError::ScriptExhausted(script.len()))
            }
            None => self
                .default_response
                .clone()
                .ok_or(BackendError::ScriptExhausted(0)),
        }
    }
}

impl ChatBackend for KeyedMock {
    fn complete(
        &self,
        conv: &Conversation,
        _params: &SamplingParams,
    ) -> Result<CompletionResult, BackendError> {
        let started = Instant::now();
        self.calls.fetch_add(1, Ordering::SeqCst);
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        let result = self.respond(conv);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        let text = result?;
        Ok(CompletionResult {
            usage: Usage::estimated(conv, &text, &CharsPerToken::default()),
            text,
            latency: started.elapsed(),
        })
    }

    fn model_name(&self) -> &str {
        &self.model_name
    }

    fn pricing(&self) -> Pricing {
        self.pricing
    }
}
