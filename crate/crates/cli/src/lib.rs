//! Batch front end for multi-study factor analysis: configuration, data
//! ingestion, run orchestration and persistence of chains, estimates,
//! metrics and networks.

pub mod chainio;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod pipeline;
