//! Dataset generation, metrics, file formats, configuration and the
//! command implementations behind the CLI.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod image_io;
pub mod metrics;
pub mod tensor_file;
