//! Desk-scale toolkit for studying backdoor poisoning of sequential face
//! recognition pipelines: trigger generation and injection, dataset
//! poisoning operators, a pluggable detector/antispoofer/extractor pipeline,
//! the full per-stage and system-level metric suite, large-margin loss math,
//! and an early identity-pruning training defense.

pub mod bench;
pub mod defense;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod losses;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod poisoning;
pub mod seeds;
pub mod store;
pub mod synth;
pub mod triggers;

pub use error::{Error, Result, Stage};
