//! Dataset formats, a synthetic scene generator and the pipeline commands
//! behind the `shape-targets` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod scene;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
