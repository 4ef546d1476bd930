//! Run manifest: enough to reproduce a run and verify its artifacts.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub input_digests: BTreeMap<String, String>,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub timings_secs: BTreeMap<String, f64>,
    pub outcome: String,
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    started: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64) -> Self {
        ManifestBuilder {
            manifest: RunManifest {
                command: command.to_string(),
                config_digest: String::new(),
                input_digests: BTreeMap::new(),
                seed,
                artifacts: Vec::new(),
                timings_secs: BTreeMap::new(),
                outcome: "incomplete".to_string(),
            },
            started: Instant::now(),
        }
    }

    pub fn config_digest(&mut self, digest: String) -> &mut Self {
        self.manifest.config_digest = digest;
        self
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<&mut Self, CliError> {
        let digest = mmjail_core::artifact::file_digest(path)
            .map_err(|e| CliError::Input(e.to_string()))?;
        self.manifest.input_digests.insert(label.to_string(), digest);
        Ok(self)
    }

    pub fn artifact(&mut self, relative: &str) -> &mut Self {
        self.manifest.artifacts.push(relative.to_string());
        self
    }

    pub fn timing(&mut self, label: &str, secs: f64) -> &mut Self {
        self.manifest.timings_secs.insert(label.to_string(), secs);
        self
    }

    /// Finish with the given outcome and write atomically.
    pub fn write(mut self, dir: &Path, outcome: &str) -> Result<(), CliError> {
        self.manifest.outcome = outcome.to_string();
        self.manifest
            .timings_secs
            .insert("total".to_string(), self.started.elapsed().as_secs_f64());
        let bytes = serde_json::to_vec_pretty(&self.manifest)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        mmjail_core::artifact::atomic_write(&dir.join("manifest.json"), &bytes)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        Ok(())
    }
}
