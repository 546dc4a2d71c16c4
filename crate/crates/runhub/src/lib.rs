//! Command line, workspace persistence and HTTP service for the latent
//! feature unlearning pipeline.
//!
//! - [`config`]: strict versioned JSON configs and `--set` overrides
//! - [`workspace`]: artifacts, manifests, selections and reviews on disk
//! - [`pipeline`]: the stages (synth, train, identify, unlearn, oracle, eval, attack, ablate)
//! - [`server`]: the axum API and its single-worker job queue
//! - [`cli`]: argument parsing and exit codes

pub mod cli;
pub mod config;
pub mod error;
pub mod imaging;
pub mod pipeline;
pub mod server;
pub mod workspace;

pub use error::RunError;
