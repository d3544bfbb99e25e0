use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::SamplingParams;
use crate::corpus::COLLEGE_CONFIDENTIAL;
use crate::label::CANONICAL_PHRASES;

const SHORT_INSTRUCTION: &str = include_str!("../../assets/prompts/short_instruction.txt");
const SHORT_RULES: &str = include_str!("../../assets/prompts/short_rules.txt");
const SHORT_RETRY: &str = include_str!("../../assets/prompts/short_retry.txt");
const LONG_INSTRUCTION: &str = include_str!("../../assets/prompts/long_instruction.txt");
const LONG_RETRY: &str = include_str!("../../assets/prompts/long_retry.txt");
pub(crate) const SUMMARY_INSTRUCTION: &str = include_str!("../../assets/prompts/summary_instruction.txt");
pub(crate) const SUMMARY_RETRY: &str = include_str!("../../assets/prompts/summary_retry.txt");

pub const DEFAULT_DELIMITER: &str = "```";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptStyle {
    Short,
    Long,
}

impl PromptStyle {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptStyle::Short => "short",
            PromptStyle::Long => "long",
        }
    }

    /// Sampling settings that worked best for each style.
    pub fn default_sampling(self) -> SamplingParams {
        match self {
            PromptStyle::Short => SamplingParams::new(1.0, 0.7, SamplingParams::DEFAULT_MAX_OUTPUT_TOKENS),
            PromptStyle::Long => SamplingParams::new(0.7, 0.1, SamplingParams::DEFAULT_MAX_OUTPUT_TOKENS),
        }
    }
}

impl fmt::Display for PromptStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "short" => Ok(PromptStyle::Short),
            "long" => Ok(PromptStyle::Long),
            other => Err(format!("unknown prompt style {other:?} (expected short or long)")),
        }
    }
}

/// Which wording the prompts use for the alternatives and the assumed role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptDomain {
    /// College admission forum: alternatives are "colleges".
    CollegeConfidential,
    /// Anything else: alternatives are "options", role is a generic forum user.
    Generic,
}

impl PromptDomain {
    pub fn for_dataset_tag(tag: &str) -> Self {
        if tag == COLLEGE_CONFIDENTIAL {
            PromptDomain::CollegeConfidential
        } else {
            PromptDomain::Generic
        }
    }

    fn item(self) -> &'static str {
        match self {
            PromptDomain::CollegeConfidential => "college",
            PromptDomain::Generic => "option",
        }
    }

    fn items(self) -> &'static str {
        match self {
            PromptDomain::CollegeConfidential => "colleges",
            PromptDomain::Generic => "options",
        }
    }

    /// Role sentence of the long instruction.
    pub fn role(self) -> &'static str {
        match self {
            PromptDomain::CollegeConfidential => "a user on college confidential forums",
            PromptDomain::Generic => "an internet forum user",
        }
    }
}

/// A fully rendered prompt style: instruction, retry reminder and the
/// formatting of task messages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub style: PromptStyle,
    pub domain: PromptDomain,
    pub domain_role: String,
    pub delimiter: String,
    pub instruction_text: String,
    pub retry_text: String,
}

fn render_short_rules(domain: PromptDomain) -> String {
    SHORT_RULES
        .trim_end()
        .replace("{items}", domain.items())
        .replace("{item}", domain.item())
}

impl PromptTemplate {
    pub fn new(style: PromptStyle, domain: PromptDomain) -> Self {
        let (instruction_text, retry_text) = match style {
            PromptStyle::Short => {
                let rules = render_short_rules(domain);
                (
                    SHORT_INSTRUCTION
                        .trim_end()
                        .replace("{items}", domain.items())
                        .replace("{rules}", &rules),
                    SHORT_RETRY.trim_end().replace("{rules}", &rules),
                )
            }
            PromptStyle::Long => (
                LONG_INSTRUCTION.trim_end().replace("{role}", domain.role()),
                LONG_RETRY.trim_end().to_string(),
            ),
        };
        PromptTemplate {
            style,
            domain,
            domain_role: domain.role().to_string(),
            delimiter: DEFAULT_DELIMITER.to_string(),
            instruction_text,
            retry_text,
        }
    }

    pub fn short(domain: PromptDomain) -> Self {
        Self::new(PromptStyle::Short, domain)
    }

    pub fn long(domain: PromptDomain) -> Self {
        Self::new(PromptStyle::Long, domain)
    }

    pub fn for_dataset(style: PromptStyle, tag: &str) -> Self {
        Self::new(style, PromptDomain::for_dataset_tag(tag))
    }

    /// Swap the slot delimiter everywhere it appears in the rendered texts.
    pub fn with_delimiter(mut self, delimiter: impl Into<String>) -> Self {
        let delimiter = delimiter.into();
        self.instruction_text = self.instruction_text.replace(&self.delimiter, &delimiter);
        self.retry_text = self.retry_text.replace(&self.delimiter, &delimiter);
        self.delimiter = delimiter;
        self
    }

    pub fn canonical_phrases(&self) -> [&'static str; 4] {
        CANONICAL_PHRASES
    }

    pub fn wrap(&self, s: &str) -> String {
        format!("{d}{s}{d}", d = self.delimiter)
    }

    /// The user message presenting one comment and its two alternatives.
    pub fn task_message(&self, text: &str, alternative_a: &str, alternative_b: &str) -> String {
        let d = &self.delimiter;
        match self.style {
            PromptStyle::Short => {
                let item = capitalize(self.domain.item());
                format!(
                    "{item} A: {d}{alternative_a}{d}\n{item} B: {d}{alternative_b}{d}\nComment: {d}{text}{d}"
                )
            }
            PromptStyle::Long => format!(
                "{d}\nComment: {text}\n{d}\n{d}\nOption A: {alternative_a}\n{d}\n{d}\nOption B: {alternative_b}\n{d}"
            ),
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}
