//! Retrieval-augmented teaching assistant core.

pub mod answer;
pub mod chunker;
pub mod embed;
pub mod eval;
pub mod guardrail;
pub mod http;
pub mod index;
pub mod ingest;
