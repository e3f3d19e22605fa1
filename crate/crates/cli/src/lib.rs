//! File formats, scenario files and pipeline stages of the `votetrace` tool.

pub mod commands;
pub mod config;
pub mod formats;
