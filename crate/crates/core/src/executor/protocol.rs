//! Line-delimited JSON wire protocol between the engine and a worker process.
//!
//! Engine to worker (stdin):
//!
//! ```text
//! {"cmd":"init","trial_id":"t1","params":{...},"restore_path":null}
//! {"cmd":"step"}
//! {"cmd":"save","path":"/abs/path"}
//! {"cmd":"stop"}
//! ```
//!
//! Worker to engine (stdout):
//!
//! ```text
//! {"event":"result","step":1,"metrics":{"loss":0.5}}
//! {"event":"saved","path":"/abs/path"}
//! {"event":"done"}
//! {"event":"error","message":"..."}
//! ```
//!
//! One message per line, UTF-8, `\n`-terminated. Unknown keys in events are ignored.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::trial::{Config, Metrics};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("malformed line: {0}")]
    MalformedLine(String),
    #[error("message has no `{0}` key")]
    MissingVariantKey(&'static str),
    #[error("unknown {kind} variant `{name}`")]
    UnknownVariant { kind: &'static str, name: String },
    #[error("metric `{0}` is not a finite number")]
    NonFiniteMetric(String),
    #[error("invalid `{field}` field: {reason}")]
    InvalidField { field: &'static str, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "lowercase")]
pub enum Command {
    Init {
        trial_id: String,
        params: Config,
        restore_path: Option<PathBuf>,
    },
    Step,
    Save {
        path: PathBuf,
    },
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkerEvent {
    Result { step: u64, metrics: Metrics },
    Saved { path: PathBuf },
    Done,
    Error { message: String },
}

fn to_line(value: &impl Serialize) -> Vec<u8> {
    let mut bytes = serde_json::to_vec(value).expect("protocol messages serialize");
    bytes.push(b'\n');
    bytes
}

pub fn encode_command(cmd: &Command) -> Vec<u8> {
    to_line(cmd)
}

pub fn encode_event(event: &WorkerEvent) -> Vec<u8> {
    let mut map = Map::new();
    match event {
        WorkerEvent::Result { step, metrics } => {
            map.insert("event".into(), "result".into());
            map.insert("step".into(), (*step).into());
            map.insert("metrics".into(), serde_json::to_value(metrics).expect("finite metrics"));
        }
        WorkerEvent::Saved { path } => {
            map.insert("event".into(), "saved".into());
            map.insert("path".into(), path.to_string_lossy().into_owned().into());
        }
        WorkerEvent::Done => {
            map.insert("event".into(), "done".into());
        }
        WorkerEvent::Error { message } => {
            map.insert("event".into(), "error".into());
            map.insert("message".into(), message.clone().into());
        }
    }
    to_line(&Value::Object(map))
}

fn parse_object(line: &[u8]) -> Result<Map<String, Value>, ProtocolError> {
    let text = std::str::from_utf8(line)
        .map_err(|e| ProtocolError::MalformedLine(format!("not UTF-8: {e}")))?;
    let text = text.strip_suffix('\n').unwrap_or(text);
    let text = text.strip_suffix('\r').unwrap_or(text);
    match serde_json::from_str::<Value>(text) {
        Ok(Value::Object(map)) => Ok(map),
        Ok(other) => Err(ProtocolError::MalformedLine(format!("expected an object, got {other}"))),
        Err(e) => Err(ProtocolError::MalformedLine(e.to_string())),
    }
}

fn string_field(map: &Map<String, Value>, field: &'static str) -> Result<String, ProtocolError> {
    map.get(field)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or(ProtocolError::InvalidField {
            field,
            reason: "expected a string".into(),
        })
}

/// Decodes one worker event line.
pub fn decode_event(line: &[u8]) -> Result<WorkerEvent, ProtocolError> {
    let map = parse_object(line)?;
    let variant = map
        .get("event")
        .ok_or(ProtocolError::MissingVariantKey("event"))?
        .as_str()
        .ok_or(ProtocolError::InvalidField {
            field: "event",
            reason: "expected a string".into(),
        })?;
    match variant {
        "result" => {
            let step = map
                .get("step")
                .and_then(Value::as_u64)
                .filter(|s| *s > 0)
                .ok_or(ProtocolError::InvalidField {
                    field: "step",
                    reason: "expected a positive integer".into(),
                })?;
            let raw = map
                .get("metrics")
                .and_then(Value::as_object)
                .ok_or(ProtocolError::InvalidField {
                    field: "metrics",
                    reason: "expected an object".into(),
                })?;
            let mut metrics = Metrics::new();
            for (name, v) in raw {
                match v.as_f64() {
                    Some(x) if x.is_finite() => {
                        metrics.insert(name.clone(), x);
                    }
                    _ => return Err(ProtocolError::NonFiniteMetric(name.clone())),
                }
            }
            Ok(WorkerEvent::Result { step, metrics })
        }
        "saved" => Ok(WorkerEvent::Saved {
            path: string_field(&map, "path")?.into(),
        }),
        "done" => Ok(WorkerEvent::Done),
        "error" => Ok(WorkerEvent::Error {
            message: map
                .get("message")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string(),
        }),
        other => Err(ProtocolError::UnknownVariant {
            kind: "event",
            name: other.to_string(),
        }),
    }
}

/// Decodes one engine command line (worker side).
pub fn decode_command(line: &[u8]) -> Result<Command, ProtocolError> {
    let map = parse_object(line)?;
    let variant = map
        .get("cmd")
        .ok_or(ProtocolError::MissingVariantKey("cmd"))?
        .as_str()
        .ok_or(ProtocolError::InvalidField {
            field: "cmd",
            reason: "expected a string".into(),
        })?
        .to_string();
    if !["init", "step", "save", "stop"].contains(&variant.as_str()) {
        return Err(ProtocolError::UnknownVariant {
            kind: "command",
            name: variant,
        });
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| ProtocolError::InvalidField {
        field: "cmd",
        reason: e.to_string(),
    })
}
