//! Output files are written to a temporary sibling and renamed into place,
//! so an interrupted run never leaves a truncated file behind.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| io_err(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.flush().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

/// Build a CSV in memory, then write it atomically.
pub fn write_csv_with(
    path: &Path,
    fill: impl FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        fill(&mut w)?;
        w.flush().map_err(|e| io_err(path, e))?;
    }
    write_atomic(path, &buf)
}

pub fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

/// Shortest representation that parses back to the same number.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}
