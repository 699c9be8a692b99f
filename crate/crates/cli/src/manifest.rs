use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use flowguide::io::{docs, file_digest};
use serde::Serialize;

use crate::Failure;

/// Record of one command run: effective config, seeds, and the SHA-256 of
/// every file read or written.
#[derive(Debug, Serialize)]
pub struct Manifest {
    command: &'static str,
    version: &'static str,
    config: serde_json::Value,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

impl Manifest {
    /// Starts a manifest and echoes the effective config on stderr.
    pub fn start(command: &'static str, config: &impl Serialize) -> Result<Self, Failure> {
        let config = serde_json::to_value(config).map_err(flowguide::Error::from)?;
        eprintln!("flowguide {command}: effective config");
        eprintln!("{}", serde_json::to_string_pretty(&config).map_err(flowguide::Error::from)?);
        Ok(Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        })
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_string(), seed);
    }

    pub fn input(&mut self, path: &Path) -> Result<String, Failure> {
        let digest = file_digest(path)?;
        self.inputs.insert(path.display().to_string(), digest.clone());
        Ok(digest)
    }

    pub fn output(&mut self, path: &Path) -> Result<(), Failure> {
        let digest = file_digest(path)?;
        self.outputs.insert(path.display().to_string(), digest);
        Ok(())
    }

    /// Writes `<out_dir>/<command>.manifest.json` and returns its path.
    pub fn finish(self, out_dir: &Path) -> Result<PathBuf, Failure> {
        let path = out_dir.join(format!("{}.manifest.json", self.command));
        docs::write_json(&path, &self)?;
        Ok(path)
    }
}
