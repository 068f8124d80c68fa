//! File formats, configuration and the pipeline driver behind the
//! `gazekit` command-line tool.

pub mod cli;
pub mod config;
pub mod formats;
pub mod pipeline;
pub mod preview;
