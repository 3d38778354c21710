//! Measuring whether a guarding transformation removes sentiment from
//! reviews while keeping their topic: guard, embed, classify, bootstrap,
//! and compare against the untreated baseline.

pub mod annotation;
pub mod corpus;
pub mod digest;
pub mod embedding;
pub mod eval;
pub mod harness;
pub mod llm;
pub mod projection;
pub mod retry;
pub mod synthetic;
