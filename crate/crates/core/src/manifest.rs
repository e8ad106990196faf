//! Provenance record written next to every command's outputs.
//!
//! A manifest holds everything needed to re-run a command: its arguments,
//! resolved configuration, seeds and input digests. The creation time is
//! recorded here and nowhere else, so all other outputs of a re-run are
//! byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::io::{self, IoError};

pub const TOOL_NAME: &str = "fedpkg";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self, IoError> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: io::sha256_file(path)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub command: String,
    pub created_unix_secs: u64,
    /// Arguments and resolved configuration.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    /// Command-specific counts, e.g. dataset sizes.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            tool: TOOL_NAME.into(),
            tool_version: TOOL_VERSION.into(),
            command: command.into(),
            created_unix_secs: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            config,
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn seed(mut self, name: &str, value: u64) -> Self {
        self.seeds.insert(name.into(), value);
        self
    }

    pub fn add_input(&mut self, path: &Path) -> Result<(), IoError> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<(), IoError> {
        self.outputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<(), IoError> {
        io::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self, IoError> {
        io::read_json(path)
    }

    /// Re-hashes every listed output; returns the paths whose digest no
    /// longer matches.
    pub fn stale_outputs(&self) -> Vec<PathBuf> {
        self.outputs
            .iter()
            .filter(|f| {
                io::sha256_file(&f.path)
                    .map(|d| d != f.sha256)
                    .unwrap_or(true)
            })
            .map(|f| f.path.clone())
            .collect()
    }
}
