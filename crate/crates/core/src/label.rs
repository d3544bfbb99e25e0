//! Preference labels and the three evaluation classes they collapse to.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The four relations a text can express between alternatives A and B.
///
/// Variant order is the order few-shot exemplars are presented in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PreferenceLabel {
    #[serde(rename = "A>B")]
    APreferred,
    #[serde(rename = "A<B")]
    BPreferred,
    #[serde(rename = "NO_PREF")]
    NoPreference,
    #[serde(rename = "EQUAL")]
    EqualPreference,
}

/// The four response phrases a model is told to answer with, in prompt order.
pub const CANONICAL_PHRASES: [&str; 4] = [
    "No preference",
    "A is preferred over B",
    "B is preferred over A",
    "Equal preference",
];

impl PreferenceLabel {
    pub const ALL: [PreferenceLabel; 4] = [
        PreferenceLabel::APreferred,
        PreferenceLabel::BPreferred,
        PreferenceLabel::NoPreference,
        PreferenceLabel::EqualPreference,
    ];

    /// The exact phrase the model must respond with for this label.
    pub fn canonical_phrase(self) -> &'static str {
        match self {
            PreferenceLabel::NoPreference => CANONICAL_PHRASES[0],
            PreferenceLabel::APreferred => CANONICAL_PHRASES[1],
            PreferenceLabel::BPreferred => CANONICAL_PHRASES[2],
            PreferenceLabel::EqualPreference => CANONICAL_PHRASES[3],
        }
    }

    pub fn from_canonical_phrase(phrase: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.canonical_phrase() == phrase)
    }

    /// Label string used in dataset and outcome files.
    pub fn as_str(self) -> &'static str {
        match self {
            PreferenceLabel::APreferred => "A>B",
            PreferenceLabel::BPreferred => "A<B",
            PreferenceLabel::NoPreference => "NO_PREF",
            PreferenceLabel::EqualPreference => "EQUAL",
        }
    }

    pub fn to_eval_class(self) -> EvalClass {
        match self {
            PreferenceLabel::APreferred => EvalClass::APref,
            PreferenceLabel::BPreferred => EvalClass::BPref,
            PreferenceLabel::NoPreference | PreferenceLabel::EqualPreference => EvalClass::NA,
        }
    }
}

impl fmt::Display for PreferenceLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown preference label {0:?}")]
pub struct UnknownLabel(pub String);

impl FromStr for PreferenceLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| UnknownLabel(s.to_string()))
    }
}

/// Evaluation classes. "No preference" and "Equal preference" both score as `NA`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EvalClass {
    #[serde(rename = "A>B")]
    APref,
    #[serde(rename = "A<B")]
    BPref,
    #[serde(rename = "N/A")]
    NA,
}

impl EvalClass {
    pub const ALL: [EvalClass; 3] = [EvalClass::APref, EvalClass::BPref, EvalClass::NA];

    pub fn index(self) -> usize {
        match self {
            EvalClass::APref => 0,
            EvalClass::BPref => 1,
            EvalClass::NA => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EvalClass::APref => "A>B",
            EvalClass::BPref => "A<B",
            EvalClass::NA => "N/A",
        }
    }
}

impl fmt::Display for EvalClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<PreferenceLabel> for EvalClass {
    fn from(l: PreferenceLabel) -> Self {
        l.to_eval_class()
    }
}

/// Collapse a raw label to its evaluation class.
pub fn to_eval_class(label: PreferenceLabel) -> EvalClass {
    label.to_eval_class()
}
