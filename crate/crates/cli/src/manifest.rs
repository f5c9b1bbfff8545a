use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::Failure;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation: enough to rerun it.
#[derive(Serialize)]
pub struct Manifest {
    command: &'static str,
    version: &'static str,
    seed: u64,
    config: serde_json::Value,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
    started_unix_seconds: u64,
    wall_clock_seconds: f64,
}

impl Manifest {
    pub fn new(command: &'static str, seed: u64, config: &impl Serialize) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed,
            config: serde_json::to_value(config).expect("serializable config"),
            inputs: vec![],
            artifacts: vec![],
            started_unix_seconds: 0,
            wall_clock_seconds: 0.0,
        }
    }

    pub fn inputs(mut self, inputs: impl IntoIterator<Item = PathBuf>) -> Self {
        self.inputs.extend(inputs);
        self
    }

    pub fn artifacts(mut self, artifacts: impl IntoIterator<Item = PathBuf>) -> Self {
        self.artifacts.extend(artifacts);
        self
    }

    pub fn write(mut self, out: &Path, start: Instant) -> Result<(), Failure> {
        let elapsed = start.elapsed();
        self.wall_clock_seconds = elapsed.as_secs_f64();
        self.started_unix_seconds = SystemTime::now()
            .checked_sub(elapsed)
            .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
            .map_or(0, |d| d.as_secs());
        crate::write_json(&out.join(MANIFEST_FILE), &self)
    }
}
