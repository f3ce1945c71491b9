//! Loading session traces from JSON.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clickgate_core::replay::TraceError;
use clickgate_core::SessionTrace;

#[derive(Debug, thiserror::Error)]
pub enum TraceLoadError {
    #[error("cannot read trace {}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{origin}: malformed trace: {source}")]
    Json { origin: String, source: serde_json::Error },
    #[error("{origin}: invalid trace: {source}")]
    Invalid { origin: String, source: TraceError },
}

/// Parses and validates a trace.
pub fn parse_trace(text: &str) -> Result<SessionTrace, TraceLoadError> {
    parse_named(text, "<input>")
}

fn parse_named(text: &str, origin: &str) -> Result<SessionTrace, TraceLoadError> {
    let trace: SessionTrace =
        serde_json::from_str(text).map_err(|source| TraceLoadError::Json { origin: origin.to_string(), source })?;
    trace.validate().map_err(|source| TraceLoadError::Invalid { origin: origin.to_string(), source })?;
    Ok(trace)
}

pub fn load_trace(path: &Path) -> Result<SessionTrace, TraceLoadError> {
    let text = fs::read_to_string(path).map_err(|source| TraceLoadError::Io { path: path.to_path_buf(), source })?;
    parse_named(&text, &path.display().to_string())
}
