use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::template::{PromptTemplate, SUMMARY_INSTRUCTION, SUMMARY_RETRY};
use super::PromptError;
use crate::corpus::{ComparisonInstance, FewShotSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    fn checked(role: Role, content: impl Into<String>) -> Result<Self, PromptError> {
        let content = content.into();
        if content.is_empty() {
            return Err(PromptError::EmptyMessage(role));
        }
        Ok(ChatMessage { role, content })
    }

    pub fn system(content: impl Into<String>) -> Result<Self, PromptError> {
        Self::checked(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Result<Self, PromptError> {
        Self::checked(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Result<Self, PromptError> {
        Self::checked(Role::Assistant, content)
    }
}

/// A system message, prior (user, assistant) turns, and the user message the
/// model must answer next.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Conversation {
    system: ChatMessage,
    history: Vec<(ChatMessage, ChatMessage)>,
    final_user: ChatMessage,
}

impl Conversation {
    pub fn new(system: impl Into<String>, final_user: impl Into<String>) -> Result<Self, PromptError> {
        Ok(Conversation {
            system: ChatMessage::system(system)?,
            history: Vec::new(),
            final_user: ChatMessage::user(final_user)?,
        })
    }

    pub fn push_turn(
        &mut self,
        user: impl Into<String>,
        assistant: impl Into<String>,
    ) -> Result<(), PromptError> {
        self.history
            .push((ChatMessage::user(user)?, ChatMessage::assistant(assistant)?));
        Ok(())
    }

    pub fn system(&self) -> &ChatMessage {
        &self.system
    }

    pub fn history(&self) -> &[(ChatMessage, ChatMessage)] {
        &self.history
    }

    pub fn final_user(&self) -> &ChatMessage {
        &self.final_user
    }

    /// Messages in wire order.
    pub fn messages(&self) -> Vec<&ChatMessage> {
        let mut out = Vec::with_capacity(2 + 2 * self.history.len());
        out.push(&self.system);
        for (u, a) in &self.history {
            out.push(u);
            out.push(a);
        }
        out.push(&self.final_user);
        out
    }

    /// One `{"role":..,"content":..}` object per line, newline terminated.
    pub fn to_record_lines(&self) -> String {
        let mut out = String::new();
        for m in self.messages() {
            out.push_str(&serde_json::to_string(m).expect("message serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_record_lines(s: &str) -> Result<Self, PromptError> {
        let messages: Vec<ChatMessage> = s
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()
            .map_err(|e| PromptError::Structure(e.to_string()))?;
        let (first, rest) = messages
            .split_first()
            .ok_or_else(|| PromptError::Structure("no messages".into()))?;
        let (last, middle) = rest
            .split_last()
            .ok_or_else(|| PromptError::Structure("no final user message".into()))?;
        if first.role != Role::System || last.role != Role::User || middle.len() % 2 != 0 {
            return Err(PromptError::Structure("roles out of order".into()));
        }
        let mut conv = Conversation::new(first.content.clone(), last.content.clone())?;
        for pair in middle.chunks(2) {
            if pair[0].role != Role::User || pair[1].role != Role::Assistant {
                return Err(PromptError::Structure(
                    "history must alternate user, assistant".into(),
                ));
            }
            conv.push_turn(pair[0].content.clone(), pair[1].content.clone())?;
        }
        Ok(conv)
    }

    /// Hex SHA-256 of the record-lines serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_record_lines().as_bytes()))
    }

    /// Keep the failed exchange in history and ask again with `retry_text`.
    pub fn with_retry(&self, bad_response: &str, retry_text: &str) -> Result<Self, PromptError> {
        let mut next = self.clone();
        next.history.push((
            self.final_user.clone(),
            ChatMessage::assistant(bad_response).map_err(|_| PromptError::EmptyResponse)?,
        ));
        next.final_user = ChatMessage::user(retry_text)?;
        Ok(next)
    }
}

fn check_alternatives(t: &PromptTemplate, inst: &ComparisonInstance) -> Result<(), PromptError> {
    for name in [&inst.alternative_a, &inst.alternative_b] {
        if name.contains(&t.delimiter) {
            return Err(PromptError::DelimiterInName {
                id: inst.id.clone(),
                name: name.clone(),
            });
        }
    }
    Ok(())
}

/// Zero-shot when `fewshot` is `None` or empty; otherwise one worked turn per
/// exemplar ahead of the task.
pub fn build_conversation(
    t: &PromptTemplate,
    inst: &ComparisonInstance,
    fewshot: Option<&FewShotSet>,
) -> Result<Conversation, PromptError> {
    check_alternatives(t, inst)?;
    let mut conv = Conversation::new(
        t.instruction_text.clone(),
        t.task_message(&inst.text, &inst.alternative_a, &inst.alternative_b),
    )?;
    if let Some(fs) = fewshot {
        for (label, ex) in fs.iter() {
            check_alternatives(t, ex)?;
            if ex.gold_label != Some(label) {
                return Err(PromptError::MissingGoldLabel(ex.id.clone()));
            }
            conv.push_turn(
                t.task_message(&ex.text, &ex.alternative_a, &ex.alternative_b),
                t.wrap(label.canonical_phrase()),
            )?;
        }
    }
    Ok(conv)
}

pub fn build_retry_conversation(
    prev: &Conversation,
    bad_response: &str,
    t: &PromptTemplate,
) -> Result<Conversation, PromptError> {
    prev.with_retry(bad_response, &t.retry_text)
}

pub fn summary_retry_text() -> &'static str {
    SUMMARY_RETRY.trim_end()
}

/// Single-turn request to condense the comment down to its preference
/// content, naming both alternatives verbatim.
pub fn build_summary_conversation(inst: &ComparisonInstance) -> Result<Conversation, PromptError> {
    let d = super::template::DEFAULT_DELIMITER;
    for name in [&inst.alternative_a, &inst.alternative_b] {
        if name.contains(d) {
            return Err(PromptError::DelimiterInName {
                id: inst.id.clone(),
                name: name.clone(),
            });
        }
    }
    Conversation::new(
        SUMMARY_INSTRUCTION.trim_end(),
        format!(
            "Option A: {d}{}{d}\nOption B: {d}{}{d}\nComment: {d}{}{d}",
            inst.alternative_a, inst.alternative_b, inst.text
        ),
    )
}
