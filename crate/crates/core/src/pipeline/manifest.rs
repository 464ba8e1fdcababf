use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileStatus {
    Ok,
    Skipped,
}

/// Outcome for one input file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub input: String,
    pub output: Option<String>,
    pub status: FileStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Every file written for this input when there is more than one.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub parts: Vec<String>,
}

impl FileRecord {
    pub fn ok(input: impl Into<String>, output: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            output: Some(output.into()),
            status: FileStatus::Ok,
            error: None,
            parts: Vec::new(),
        }
    }

    pub fn skipped(input: impl Into<String>, error: impl ToString) -> Self {
        Self {
            input: input.into(),
            output: None,
            status: FileStatus::Skipped,
            error: Some(error.to_string()),
            parts: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub total_seconds: f64,
    /// Seconds spent on each input, in the order of `files`.
    pub per_file_seconds: Vec<f64>,
}

/// Record of one command run: what was asked, what was produced and how long it took.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    /// Input-to-output mapping, sorted by input name.
    pub files: Vec<FileRecord>,
    pub timings: Timings,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Self {
            tool: "stainkit".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.seed,
            config: config.clone(),
            template: None,
            files: Vec::new(),
            timings: Timings::default(),
        }
    }

    pub fn skipped(&self) -> usize {
        self.files.iter().filter(|f| f.status == FileStatus::Skipped).count()
    }

    pub fn succeeded(&self) -> usize {
        self.files.len() - self.skipped()
    }

    /// The mapping section alone, which is reproducible across runs.
    pub fn mapping_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.files)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_json()
            .and_then(|t| std::fs::write(path, t).map_err(Error::from))
            .map_err(|e| e.at(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        std::fs::read_to_string(path)
            .map_err(Error::from)
            .and_then(|t| serde_json::from_str(&t).map_err(Error::from))
            .map_err(|e| e.at(path))
    }
}
