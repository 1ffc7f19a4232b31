//! `experiment_state.json`: everything needed to resume an experiment besides
//! the checkpoint files themselves.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::ExperimentConfig;
use super::EngineError;
use crate::rng::RNG_ALGORITHM;
use crate::trial::Trial;

pub const SNAPSHOT_VERSION: u32 = 1;
pub const SNAPSHOT_FILE: &str = "experiment_state.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerSnapshot {
    pub name: String,
    pub state: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSnapshot {
    pub version: u32,
    pub config: ExperimentConfig,
    /// Number of worker events handled when the snapshot was taken.
    pub event_counter: u64,
    pub launch_counter: u64,
    /// Lines in `results.jsonl` covered by this snapshot.
    pub results_lines: u64,
    pub lineage_lines: u64,
    pub rng_algorithm: String,
    pub trials: Vec<Trial>,
    pub scheduler: SchedulerSnapshot,
    pub suggestion: Option<Value>,
}

impl ExperimentSnapshot {
    pub fn new(config: ExperimentConfig, trials: Vec<Trial>, scheduler: SchedulerSnapshot) -> Self {
        Self {
            version: SNAPSHOT_VERSION,
            config,
            event_counter: 0,
            launch_counter: 0,
            results_lines: 0,
            lineage_lines: 0,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            trials,
            scheduler,
            suggestion: None,
        }
    }

    /// Writes atomically: a temporary file in the same directory, then rename.
    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let tmp = dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            serde_json::to_writer_pretty(&mut f, self)?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(tmp, dir.join(SNAPSHOT_FILE))
    }

    pub fn read(dir: &Path) -> Result<Self, EngineError> {
        let path = dir.join(SNAPSHOT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            EngineError::ConfigInvalid(format!("no experiment snapshot at {}: {e}", path.display()))
        })?;
        let raw: Value = serde_json::from_str(&text).map_err(|e| {
            EngineError::ConfigInvalid(format!("{} is not valid JSON: {e}", path.display()))
        })?;
        let found = raw.get("version").and_then(Value::as_u64);
        if found != Some(SNAPSHOT_VERSION as u64) {
            return Err(EngineError::SnapshotVersionMismatch {
                found: found.map(|v| v.to_string()).unwrap_or_else(|| "none".into()),
                expected: SNAPSHOT_VERSION,
            });
        }
        let snap: Self = serde_json::from_value(raw).map_err(|e| {
            EngineError::ConfigInvalid(format!("{}: {e}", path.display()))
        })?;
        if snap.rng_algorithm != RNG_ALGORITHM {
            return Err(EngineError::ConfigInvalid(format!(
                "snapshot uses rng `{}`, this build provides `{RNG_ALGORITHM}`",
                snap.rng_algorithm
            )));
        }
        Ok(snap)
    }
}
