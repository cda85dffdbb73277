//! Content hashing and the per-run manifest.
//!
//! Every subcommand appends one entry to `manifest.jsonl` in the run
//! directory, recording the SHA-256 of each input and output file plus the
//! config snapshot hash and seed. Because each stage's outputs are inputs to
//! the next, the chain of entries ties the final export back to every
//! artifact that produced it. Timestamps are informational; the hash fields
//! are what reruns are compared on.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(sha256_hex(&bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifestEntry {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Relative path -> SHA-256, sorted by path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Collects hashes over the lifetime of one subcommand. Paths under the run
/// directory are keyed by their relative name, so manifests from different
/// run directories stay comparable.
pub struct ManifestRecorder {
    run_dir: std::path::PathBuf,
    entry: RunManifestEntry,
}

impl ManifestRecorder {
    pub fn start(command: &str, seed: u64, config_sha256: String, run_dir: &Path) -> Self {
        ManifestRecorder {
            run_dir: run_dir.to_path_buf(),
            entry: RunManifestEntry {
                command: command.to_string(),
                seed,
                config_sha256,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                started_unix: unix_now(),
                finished_unix: 0,
            },
        }
    }

    fn key_for(&self, path: &Path) -> String {
        path.strip_prefix(&self.run_dir).unwrap_or(path).display().to_string()
    }

    pub fn record_input(&mut self, path: &Path) -> std::io::Result<()> {
        let key = self.key_for(path);
        self.entry.inputs.insert(key, sha256_file(path)?);
        Ok(())
    }

    pub fn record_output(&mut self, path: &Path) -> std::io::Result<()> {
        let key = self.key_for(path);
        self.entry.outputs.insert(key, sha256_file(path)?);
        Ok(())
    }

    /// Append the finished entry to `<run_dir>/manifest.jsonl`.
    pub fn finish(mut self) -> std::io::Result<RunManifestEntry> {
        self.entry.finished_unix = unix_now();
        std::fs::create_dir_all(&self.run_dir)?;
        let path = self.run_dir.join("manifest.jsonl");
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        let line = serde_json::to_string(&self.entry).expect("manifest entry serializes");
        writeln!(file, "{line}")?;
        Ok(self.entry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sha256_known_vector() {
        // sha256("abc")
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn recorder_appends_entries_with_relative_keys() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        std::fs::write(&input, "hello").unwrap();

        let mut recorder = ManifestRecorder::start("ingest", 7, sha256_hex(b"cfg"), dir.path());
        recorder.record_input(&input).unwrap();
        recorder.finish().unwrap();

        let mut recorder = ManifestRecorder::start("filter", 7, sha256_hex(b"cfg"), dir.path());
        recorder.record_input(&input).unwrap();
        recorder.finish().unwrap();

        let manifest = std::fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
        let entries: Vec<RunManifestEntry> =
            manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].command, "ingest");
        assert_eq!(entries[1].command, "filter");
        assert_eq!(entries[0].inputs, entries[1].inputs);
        assert!(entries[0].inputs.contains_key("in.txt"));
    }
}
