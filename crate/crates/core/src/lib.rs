//! Comparative preference classification with chat-style language models.
//!
//! Given a text and two named alternatives A and B, decide whether the text
//! prefers A, prefers B, or expresses no (or equal) preference. The crate
//! builds the instruction prompts, runs zero- and few-shot conversations
//! against a chat backend, re-prompts when the model strays from the four
//! allowed answers, and scores predictions with three-class F1.
//!
//! Batch runs fan out over a rayon pool when the `parallel` feature (on by
//! default) is enabled.

pub mod backend;
pub mod corpus;
pub mod eval;
pub mod label;
pub mod pipeline;
pub mod prompting;

pub use label::{to_eval_class, EvalClass, PreferenceLabel, CANONICAL_PHRASES};
