//! The direct-control trainable contract and a stdio adapter that serves any
//! [`Trainable`] over the wire protocol.

use std::fs;
use std::io::{BufRead, Write};

use super::protocol::{decode_command, encode_event, Command, WorkerEvent};
use crate::trial::{Config, Metrics};

/// A model the engine drives one step at a time.
pub trait Trainable: Send {
    /// Runs one training step and returns the worker-local step count with its metrics.
    fn step(&mut self) -> Result<(u64, Metrics), String>;

    /// Serializes the full training state.
    fn save(&self) -> Result<Vec<u8>, String>;

    /// Replaces the training state with a saved one. Hyperparameters stay those
    /// the trainable was built with.
    fn restore(&mut self, bytes: &[u8]) -> Result<(), String>;
}

/// Builds a trainable from the trial's parameters.
pub type TrainableFactory = dyn Fn(&Config) -> Result<Box<dyn Trainable>, String> + Send + Sync;

/// Serves one trainable over line-delimited commands until `stop` or end of input.
pub fn serve<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    factory: &TrainableFactory,
) -> std::io::Result<()> {
    let emit = |out: &mut W, ev: WorkerEvent| -> std::io::Result<()> {
        out.write_all(&encode_event(&ev))?;
        out.flush()
    };
    let mut trainable: Option<Box<dyn Trainable>> = None;
    for line in input.split(b'\n') {
        let line = line?;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let cmd = match decode_command(&line) {
            Ok(cmd) => cmd,
            Err(e) => {
                emit(&mut output, WorkerEvent::Error { message: e.to_string() })?;
                return Ok(());
            }
        };
        let outcome = match (cmd, trainable.as_mut()) {
            (Command::Init { params, restore_path, .. }, None) => {
                let built = factory(&params).and_then(|mut t| {
                    if let Some(path) = restore_path {
                        let bytes = fs::read(&path)
                            .map_err(|e| format!("reading {}: {e}", path.display()))?;
                        t.restore(&bytes)?;
                    }
                    Ok(t)
                });
                built.map(|t| {
                    trainable = Some(t);
                    None
                })
            }
            (Command::Init { .. }, Some(_)) => Err("init received twice".to_string()),
            (_, None) => Err("expected init as the first command".to_string()),
            (Command::Step, Some(t)) => t
                .step()
                .map(|(step, metrics)| Some(WorkerEvent::Result { step, metrics })),
            (Command::Save { path }, Some(t)) => t.save().and_then(|bytes| {
                fs::write(&path, bytes)
                    .map_err(|e| format!("writing {}: {e}", path.display()))
                    .map(|_| Some(WorkerEvent::Saved { path }))
            }),
            (Command::Stop, Some(_)) => {
                emit(&mut output, WorkerEvent::Done)?;
                return Ok(());
            }
        };
        match outcome {
            Ok(Some(ev)) => emit(&mut output, ev)?,
            Ok(None) => {}
            Err(message) => {
                emit(&mut output, WorkerEvent::Error { message })?;
                return Ok(());
            }
        }
    }
    Ok(())
}
