//! Retrieval-centric generation engine.
//!
//! Documents are split into passages, embedded and indexed into knowledge
//! bases. Each chat turn selects a knowledge base, retrieves the top passages,
//! keeps a weighted prefix of their text, and assembles a five-slot prompt for
//! an external language model.

pub mod analysis;
pub mod config;
pub mod embed;
pub mod exec;
pub mod index;
pub mod ingest;
pub mod kb;
pub mod llm;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
