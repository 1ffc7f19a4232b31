//! Worker processes, the wire protocol and checkpoint storage.

pub mod checkpoint;
pub mod protocol;
pub mod sim;
pub mod subprocess;
pub mod trainable;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trial::{Config, TrialId};
use protocol::{Command, ProtocolError, WorkerEvent};

pub use checkpoint::{CheckpointError, CheckpointStore};
pub use sim::{SimExecutor, SimKind};
pub use subprocess::SubprocessExecutor;

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("failed to spawn worker for trial {trial}: {source}")]
    Spawn {
        trial: TrialId,
        #[source]
        source: std::io::Error,
    },
    #[error("no live worker for trial {0}")]
    UnknownTrial(TrialId),
    #[error("writing to worker of trial {trial}: {source}")]
    Write {
        trial: TrialId,
        #[source]
        source: std::io::Error,
    },
}

/// How to obtain a trainable for each trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrainableSpec {
    /// In-process simulated curve, written `"sim:<kind>"` in configs.
    Sim(#[serde(with = "sim_spec")] SimKind),
    /// Worker process speaking the line protocol on stdin/stdout.
    Command {
        cmd: Vec<String>,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        env: BTreeMap<String, String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        workdir: Option<PathBuf>,
    },
}

mod sim_spec {
    use super::SimKind;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(kind: &SimKind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("sim:{kind}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<SimKind, D::Error> {
        let s = String::deserialize(d)?;
        s.strip_prefix("sim:")
            .ok_or_else(|| D::Error::custom(format!("expected `sim:<kind>`, got `{s}`")))?
            .parse()
            .map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaunchSpec {
    pub trial: TrialId,
    /// Distinguishes successive workers of one trial so late events from a
    /// retired worker can be discarded.
    pub launch: u64,
    pub params: Config,
    pub restore_path: Option<PathBuf>,
}

impl LaunchSpec {
    pub fn init_command(&self) -> Command {
        Command::Init {
            trial_id: self.trial.to_string(),
            params: self.params.clone(),
            restore_path: self.restore_path.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    Worker(WorkerEvent),
    /// The worker sent a line that does not decode.
    Protocol(ProtocolError),
    /// The worker's stdout closed.
    Exited {
        code: Option<i32>,
        stderr_tail: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutorEvent {
    pub trial: TrialId,
    pub launch: u64,
    pub kind: EventKind,
    /// Seconds since launch when the event arrived; logical for simulated workers.
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Poll {
    Event(ExecutorEvent),
    /// Nothing arrived within the timeout.
    Timeout,
    /// Nothing is outstanding; waiting would block forever.
    Idle,
}

/// Runs trainables on behalf of the engine. Every `launch` is followed by the
/// `init` command; the engine then sends `step`, `save` and `stop` and reads
/// replies through `next_event`.
pub trait Executor: Send {
    fn launch(&mut self, spec: LaunchSpec) -> Result<(), ExecutorError>;

    fn send(&mut self, trial: &TrialId, cmd: &Command) -> Result<(), ExecutorError>;

    /// Forgets the trial's worker, terminating it if it is still running.
    fn retire(&mut self, trial: &TrialId);

    fn next_event(&mut self, timeout: Option<Duration>) -> Poll;

    /// Retires every worker and drops queued events.
    fn reset(&mut self);
}

pub fn build_executor(
    spec: &TrainableSpec,
    log_dir: Option<PathBuf>,
) -> Box<dyn Executor> {
    match spec {
        TrainableSpec::Sim(kind) => Box::new(SimExecutor::new(*kind)),
        TrainableSpec::Command { cmd, env, workdir } => Box::new(SubprocessExecutor::new(
            cmd.clone(),
            env.clone(),
            workdir.clone(),
            log_dir,
        )),
    }
}
