//! Prompt construction and response parsing.
//!
//! Two instruction styles are shipped, `short` and `long`, each with its own
//! retry reminder. Data slots (comment and alternative names) are wrapped in a
//! delimiter, triple backticks by default, and the model is told to answer
//! with one of four canonical phrases. Responses that miss the format are
//! answered with the retry reminder while the bad answer stays in history.

mod conversation;
mod parse;
mod template;

pub use conversation::{
    build_conversation, build_retry_conversation, build_summary_conversation, summary_retry_text,
    ChatMessage, Conversation, Role,
};
pub use parse::{normalize_response, parse_response, ParseResult};
pub use template::{PromptDomain, PromptStyle, PromptTemplate, DEFAULT_DELIMITER};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("instance {id:?}: alternative name {name:?} contains the prompt delimiter")]
    DelimiterInName { id: String, name: String },
    #[error("few-shot exemplar {0:?} has no matching gold label")]
    MissingGoldLabel(String),
    #[error("empty {0:?} message")]
    EmptyMessage(Role),
    #[error("cannot retry after an empty response")]
    EmptyResponse,
    #[error("malformed conversation: {0}")]
    Structure(String),
}
