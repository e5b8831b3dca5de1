//! Files, configuration and command line for the causal transformation model
//! in `causaltm-core`.

pub mod cli;
pub mod config;
pub mod ingest;
pub mod output;
pub mod run;
pub mod study;
