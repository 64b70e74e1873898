//! Run manifest: the resolved inputs, a content hash over them, and a digest
//! of every file the run wrote.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliResult;
use crate::formats::{read_json, to_json, write_file};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "caffnet-run";
pub const MANIFEST_VERSION: u32 = 1;

pub fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 of `blob <len>\0<bytes>`, the way git names blobs.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the command and resolved configuration. The output directory
/// and config file path are left out so the same inputs hash the same
/// wherever they are written.
pub fn input_hash<C: Serialize>(command: &str, config: &C) -> CliResult<String> {
    #[derive(Serialize)]
    struct Inputs<'a, C> {
        command: &'a str,
        config: &'a C,
    }
    let bytes = serde_json::to_vec(&Inputs { command, config })
        .map_err(|e| crate::error::CliError::Format(e.to_string()))?;
    Ok(blob_hash(&bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedTiming {
    pub seed: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    pub seeds: Vec<SeedTiming>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub command: String,
    pub config_path: Option<String>,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    pub hash: String,
    pub created_unix: u64,
    pub timings: Timings,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> CliResult<()> {
        write_file(&dir.join(MANIFEST_FILE), &to_json(self)?)
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(crate::error::CliError::Config(format!(
                "{} has no {MANIFEST_FILE}",
                dir.display()
            )));
        }
        let m: RunManifest = read_json(&path)?;
        if m.format != MANIFEST_FORMAT || m.version != MANIFEST_VERSION {
            return Err(crate::error::CliError::Format(format!(
                "unsupported manifest {} v{}",
                m.format, m.version
            )));
        }
        Ok(m)
    }

    pub fn scenario(&self) -> Option<&str> {
        self.config.get("scenario").and_then(|v| v.as_str())
    }

    pub fn method(&self) -> Option<&str> {
        self.config.get("method").and_then(|v| v.as_str())
    }
}
