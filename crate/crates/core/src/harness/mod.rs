//! Experiment orchestration: synthetic corpora, experiment runners,
//! reports, and configuration.

pub mod config;
pub mod corpus;
pub mod experiment;
pub mod report;
