//! Synthetic conversational retrieval pipeline.
//!
//! Samples corpus passages, prompts a pluggable completion backend with
//! few-shot demonstrations to synthesize multi-turn search conversations,
//! filters the resulting query-passage pairs for round-trip consistency,
//! trains a dense dual-encoder retriever on the survivors, and evaluates
//! conversational retrieval quality with standard IR metrics.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod filter;
pub mod generator;
pub mod pipeline;
pub mod prompt;
pub mod retriever;
pub mod seeding;

pub use error::{Error, Result};
