//! Experiment orchestration: configuration, drivers and output writers.

pub mod config;
pub mod csv;
pub mod experiments;
pub mod svg;

use std::path::Path;

pub use config::{parse_scheme, ExperimentConfig, Formats, ModelChoice};
pub use experiments::*;

use crate::error::Result;

/// Writes every file into `dir`, creating it if needed. Files are written in order after all computation finished.
pub fn write_files(dir: &Path, files: &[OutputFile]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for f in files {
        std::fs::write(dir.join(&f.name), f.contents.as_bytes())?;
    }
    Ok(())
}
