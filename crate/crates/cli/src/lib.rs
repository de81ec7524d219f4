//! Command-line pipeline around `capreward-core`: world generation, encoder
//! training, captioner training, generation, evaluation and manifest replay.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use error::{CliError, CliResult};
