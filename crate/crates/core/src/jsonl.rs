//! Line-delimited JSON helpers. All pipeline artifacts are UTF-8 JSONL with
//! a trailing newline on every line, written atomically enough for a single
//! writer per file.

use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum JsonlError {
    #[error("cannot open {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = File::open(path).map_err(|source| JsonlError::Io { path: path.display().to_string(), source })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (index, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| JsonlError::Io { path: path.display().to_string(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            path: path.display().to_string(),
            line: index + 1,
            message: e.to_string(),
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), JsonlError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|source| JsonlError::Io { path: path.display().to_string(), source })?;
    }
    let file = File::create(path).map_err(|source| JsonlError::Io { path: path.display().to_string(), source })?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("pipeline records serialize infallibly");
        writeln!(writer, "{line}").map_err(|source| JsonlError::Io { path: path.display().to_string(), source })?;
    }
    writer.flush().map_err(|source| JsonlError::Io { path: path.display().to_string(), source })?;
    Ok(())
}

/// Serialize records to JSONL bytes without touching disk; used for content
/// hashing of in-memory inputs.
pub fn to_jsonl_bytes<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut bytes = Vec::new();
    for record in records {
        serde_json::to_writer(&mut bytes, record).expect("pipeline records serialize infallibly");
        bytes.push(b'\n');
    }
    bytes
}
