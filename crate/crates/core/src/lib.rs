//! Benchmark harness for recommending with chat-completion models from
//! retrieved collaborative context.
//!
//! The pipeline loads a rating matrix ([`ingest`]), holds out a share of
//! every user's ratings, retrieves the most similar users over the remaining
//! known ratings ([`retrieval`]), renders one of four prompt strategies
//! ([`promptgen`]), sends it to a completion backend ([`gateway`]) and scores
//! the recommended IDs against the held-out items ([`metrics`]). A
//! matrix-factorization model ([`mf`]) trained on the same known ratings
//! provides the comparison baseline. [`runner`] ties the stages into a
//! resumable, seed-deterministic sweep.

pub mod error;
pub mod gateway;
pub mod ingest;
pub mod metrics;
pub mod mf;
pub mod promptgen;
pub mod retrieval;
pub mod runner;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
