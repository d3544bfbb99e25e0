use serde::{Deserialize, Serialize};

use super::PromptTemplate;
use crate::label::PreferenceLabel;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParseResult {
    /// The whole response is a canonical phrase, modulo wrapping and case.
    Exact(PreferenceLabel),
    /// Exactly one canonical phrase appears somewhere inside a longer response.
    Embedded(PreferenceLabel),
    Malformed(String),
}

impl ParseResult {
    pub fn label(&self) -> Option<PreferenceLabel> {
        match self {
            ParseResult::Exact(l) | ParseResult::Embedded(l) => Some(*l),
            ParseResult::Malformed(_) => None,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, ParseResult::Exact(_))
    }
}

const QUOTES: [&str; 4] = ["\"", "'", "`", "*"];

fn trim_trailing_punctuation(s: &str) -> &str {
    s.trim_end_matches(['.', '!', '?', ',', ';', ':']).trim_end()
}

fn strip_one_layer<'a>(s: &'a str, delimiter: &str) -> &'a str {
    for wrap in std::iter::once(delimiter).chain(QUOTES) {
        if wrap.is_empty() {
            continue;
        }
        if s.len() >= 2 * wrap.len() {
            if let Some(inner) = s.strip_prefix(wrap).and_then(|r| r.strip_suffix(wrap)) {
                return inner;
            }
        }
    }
    s
}

/// Reduce a response to the form compared against the canonical phrases.
pub fn normalize_response(raw: &str, delimiter: &str) -> String {
    let s = trim_trailing_punctuation(raw.trim());
    let s = strip_one_layer(s, delimiter).trim();
    trim_trailing_punctuation(s).to_lowercase()
}

pub fn parse_response(raw: &str, t: &PromptTemplate) -> ParseResult {
    let normalized = normalize_response(raw, &t.delimiter);
    for label in PreferenceLabel::ALL {
        if normalized == label.canonical_phrase().to_lowercase() {
            return ParseResult::Exact(label);
        }
    }
    let folded = raw.to_lowercase();
    let mut found = PreferenceLabel::ALL
        .into_iter()
        .filter(|l| folded.contains(&l.canonical_phrase().to_lowercase()));
    match (found.next(), found.next()) {
        (Some(label), None) => ParseResult::Embedded(label),
        _ => ParseResult::Malformed(raw.to_string()),
    }
}
