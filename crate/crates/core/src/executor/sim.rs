//! Deterministic simulated trainables and an in-process executor that drives them.
//!
//! Two curve families are provided:
//!
//! * `exp-curve`: `loss(t) = b + (1 - b) * exp(-t / tau)` with `b = final_loss` and
//!   `tau` read from the trial config (`tau` defaults to 1). The result for step
//!   `t + 1` reports `loss(t)`.
//! * `pbt-quadratic`: `Q(theta) = 1.2 - theta_1^2 - theta_2^2`, trained by ascent on the
//!   surrogate `1.2 - h_1 theta_1^2 - h_2 theta_2^2` with step size 0.01 starting from
//!   `theta = (0.9, 0.9)`. Each step updates `theta` and then reports `loss = -Q` and `q = Q`.
//!   `h1` and `h2` come from the trial config.
//!
//! Either kind accepts an integer `fail_at_step` parameter that makes the step
//! reaching it fail, for exercising error handling.
//!
//! Checkpoints are UTF-8 JSON, e.g. `{"kind":"pbt-quadratic","t":4,"theta":[0.83,0.86]}`.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::fs;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::protocol::{Command, WorkerEvent};
use super::trainable::Trainable;
use super::{EventKind, Executor, ExecutorError, ExecutorEvent, LaunchSpec, Poll};
use crate::num::Scalar;
use crate::trial::{Config, Metrics, ParamValue, TrialId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimKind {
    ExpCurve,
    PbtQuadratic,
}

impl SimKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SimKind::ExpCurve => "exp-curve",
            SimKind::PbtQuadratic => "pbt-quadratic",
        }
    }

    /// Builds the `f64` trainable for a trial config.
    pub fn build(self, config: &Config) -> Result<Box<dyn Trainable>, String> {
        Ok(match self {
            SimKind::ExpCurve => Box::new(ExpCurve::<f64>::from_config(config)?),
            SimKind::PbtQuadratic => Box::new(QuadraticToy::<f64>::from_config(config)?),
        })
    }
}

impl fmt::Display for SimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SimKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exp-curve" => Ok(SimKind::ExpCurve),
            "pbt-quadratic" => Ok(SimKind::PbtQuadratic),
            other => Err(format!("unknown sim trainable `{other}`")),
        }
    }
}

fn real_param(config: &Config, name: &str) -> Result<Option<f64>, String> {
    match config.get(name) {
        None => Ok(None),
        Some(v) => v
            .as_f64()
            .filter(|x| x.is_finite())
            .map(Some)
            .ok_or_else(|| format!("parameter `{name}` must be a finite number")),
    }
}

fn fail_at(config: &Config) -> Result<Option<u64>, String> {
    match config.get("fail_at_step") {
        None => Ok(None),
        Some(ParamValue::Int(i)) if *i > 0 => Ok(Some(*i as u64)),
        Some(other) => Err(format!("fail_at_step must be a positive integer, got {other}")),
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SimCheckpoint {
    kind: SimKind,
    t: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    theta: Option<[f64; 2]>,
}

fn decode_checkpoint(bytes: &[u8], expect: SimKind) -> Result<SimCheckpoint, String> {
    let ckpt: SimCheckpoint =
        serde_json::from_slice(bytes).map_err(|e| format!("bad sim checkpoint: {e}"))?;
    if ckpt.kind != expect {
        return Err(format!("checkpoint is for {}, not {expect}", ckpt.kind));
    }
    Ok(ckpt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpCurve<S: Scalar> {
    final_loss: S,
    tau: S,
    t: u64,
    fail_at: Option<u64>,
}

impl<S: Scalar> ExpCurve<S> {
    pub fn new(final_loss: S, tau: S) -> Result<Self, String> {
        if !(final_loss > S::zero() && final_loss < S::one()) {
            return Err(format!("final_loss must be in (0, 1), got {final_loss}"));
        }
        if !(tau > S::zero() && tau.is_finite()) {
            return Err(format!("tau must be positive, got {tau}"));
        }
        Ok(Self {
            final_loss,
            tau,
            t: 0,
            fail_at: None,
        })
    }

    pub fn from_config(config: &Config) -> Result<Self, String> {
        let b = real_param(config, "final_loss")?.ok_or("exp-curve needs `final_loss`")?;
        let tau = real_param(config, "tau")?.unwrap_or(1.0);
        let mut curve = Self::new(S::from_f64_lossy(b), S::from_f64_lossy(tau))?;
        curve.fail_at = fail_at(config)?;
        Ok(curve)
    }

    pub fn loss_at(&self, t: u64) -> S {
        let t = S::from_u64(t).unwrap_or_else(S::infinity);
        self.final_loss + (S::one() - self.final_loss) * (-t / self.tau).exp()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl<S: Scalar> Trainable for ExpCurve<S> {
    fn step(&mut self) -> Result<(u64, Metrics), String> {
        if self.fail_at == Some(self.t + 1) {
            return Err(format!("injected failure at step {}", self.t + 1));
        }
        let loss = self.loss_at(self.t);
        self.t += 1;
        let mut metrics = Metrics::new();
        metrics.insert("loss".into(), loss.to_f64_lossy());
        Ok((self.t, metrics))
    }

    fn save(&self) -> Result<Vec<u8>, String> {
        serde_json::to_vec(&SimCheckpoint {
            kind: SimKind::ExpCurve,
            t: self.t,
            theta: None,
        })
        .map_err(|e| e.to_string())
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), String> {
        self.t = decode_checkpoint(bytes, SimKind::ExpCurve)?.t;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticToy<S: Scalar> {
    h: [S; 2],
    theta: [S; 2],
    t: u64,
    fail_at: Option<u64>,
}

impl<S: Scalar> QuadraticToy<S> {
    pub const STEP_SIZE: f64 = 0.01;
    pub const THETA_INIT: f64 = 0.9;

    pub fn new(h: [S; 2]) -> Self {
        let init = S::from_f64_lossy(Self::THETA_INIT);
        Self {
            h,
            theta: [init, init],
            t: 0,
            fail_at: None,
        }
    }

    pub fn from_config(config: &Config) -> Result<Self, String> {
        let h1 = real_param(config, "h1")?.ok_or("pbt-quadratic needs `h1`")?;
        let h2 = real_param(config, "h2")?.ok_or("pbt-quadratic needs `h2`")?;
        let mut toy = Self::new([S::from_f64_lossy(h1), S::from_f64_lossy(h2)]);
        toy.fail_at = fail_at(config)?;
        Ok(toy)
    }

    pub fn with_theta(mut self, theta: [S; 2]) -> Self {
        self.theta = theta;
        self
    }

    pub fn theta(&self) -> [S; 2] {
        self.theta
    }

    /// True objective `Q`, larger is better.
    pub fn objective(&self) -> S {
        S::from_f64_lossy(1.2) - self.theta[0] * self.theta[0] - self.theta[1] * self.theta[1]
    }

    fn update(&mut self) {
        let lr = S::from_f64_lossy(Self::STEP_SIZE);
        let two = S::one() + S::one();
        for i in 0..2 {
            // gradient of the surrogate w.r.t. theta_i
            let grad = -(two * self.h[i] * self.theta[i]);
            self.theta[i] = self.theta[i] + lr * grad;
        }
    }
}

impl<S: Scalar> Trainable for QuadraticToy<S> {
    fn step(&mut self) -> Result<(u64, Metrics), String> {
        if self.fail_at == Some(self.t + 1) {
            return Err(format!("injected failure at step {}", self.t + 1));
        }
        self.update();
        self.t += 1;
        let q = self.objective().to_f64_lossy();
        let mut metrics = Metrics::new();
        metrics.insert("loss".into(), -q);
        metrics.insert("q".into(), q);
        Ok((self.t, metrics))
    }

    fn save(&self) -> Result<Vec<u8>, String> {
        serde_json::to_vec(&SimCheckpoint {
            kind: SimKind::PbtQuadratic,
            t: self.t,
            theta: Some([self.theta[0].to_f64_lossy(), self.theta[1].to_f64_lossy()]),
        })
        .map_err(|e| e.to_string())
    }

    fn restore(&mut self, bytes: &[u8]) -> Result<(), String> {
        let ckpt = decode_checkpoint(bytes, SimKind::PbtQuadratic)?;
        let theta = ckpt.theta.ok_or("pbt-quadratic checkpoint has no theta")?;
        self.t = ckpt.t;
        self.theta = [S::from_f64_lossy(theta[0]), S::from_f64_lossy(theta[1])];
        Ok(())
    }
}

struct SimWorker {
    launch: u64,
    trainable: Box<dyn Trainable>,
}

/// Runs sim trainables in-process. Commands are handled synchronously and their
/// events queued in issue order, so a run is a deterministic function of the
/// engine's command sequence.
pub struct SimExecutor {
    kind: SimKind,
    workers: BTreeMap<TrialId, SimWorker>,
    queue: VecDeque<ExecutorEvent>,
}

impl SimExecutor {
    pub fn new(kind: SimKind) -> Self {
        Self {
            kind,
            workers: BTreeMap::new(),
            queue: VecDeque::new(),
        }
    }

    fn push(&mut self, trial: &TrialId, launch: u64, event: WorkerEvent, wall_time: Option<f64>) {
        self.queue.push_back(ExecutorEvent {
            trial: trial.clone(),
            launch,
            kind: EventKind::Worker(event),
            wall_time,
        });
    }
}

impl Executor for SimExecutor {
    fn launch(&mut self, spec: LaunchSpec) -> Result<(), ExecutorError> {
        let built = self.kind.build(&spec.params).and_then(|mut t| {
            if let Some(path) = &spec.restore_path {
                let bytes =
                    fs::read(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
                t.restore(&bytes)?;
            }
            Ok(t)
        });
        match built {
            Ok(trainable) => {
                self.workers.insert(
                    spec.trial.clone(),
                    SimWorker {
                        launch: spec.launch,
                        trainable,
                    },
                );
            }
            Err(message) => self.push(&spec.trial, spec.launch, WorkerEvent::Error { message }, None),
        }
        Ok(())
    }

    fn send(&mut self, trial: &TrialId, cmd: &Command) -> Result<(), ExecutorError> {
        let worker = self
            .workers
            .get_mut(trial)
            .ok_or_else(|| ExecutorError::UnknownTrial(trial.clone()))?;
        let launch = worker.launch;
        let (event, wall_time) = match cmd {
            Command::Step => match worker.trainable.step() {
                Ok((step, metrics)) => (WorkerEvent::Result { step, metrics }, Some(step as f64)),
                Err(message) => (WorkerEvent::Error { message }, None),
            },
            Command::Save { path } => {
                let written = worker
                    .trainable
                    .save()
                    .and_then(|bytes| fs::write(path, bytes).map_err(|e| e.to_string()));
                match written {
                    Ok(()) => (WorkerEvent::Saved { path: path.clone() }, None),
                    Err(message) => (WorkerEvent::Error { message }, None),
                }
            }
            Command::Stop => {
                self.workers.remove(trial);
                (WorkerEvent::Done, None)
            }
            Command::Init { .. } => (
                WorkerEvent::Error {
                    message: "init received twice".into(),
                },
                None,
            ),
        };
        self.push(trial, launch, event, wall_time);
        Ok(())
    }

    fn retire(&mut self, trial: &TrialId) {
        self.workers.remove(trial);
        self.queue.retain(|ev| &ev.trial != trial);
    }

    fn next_event(&mut self, _timeout: Option<Duration>) -> Poll {
        match self.queue.pop_front() {
            Some(ev) => Poll::Event(ev),
            None => Poll::Idle,
        }
    }

    fn reset(&mut self) {
        self.workers.clear();
        self.queue.clear();
    }
}
