//! Trials, their results, and the lifecycle state machine.

use std::fmt;
use std::path::PathBuf;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Hyperparameter value: real, integer, or string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Int(i64),
    Real(f64),
    Str(String),
}

impl ParamValue {
    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            ParamValue::Int(i) => Some(i as f64),
            ParamValue::Real(r) => Some(r),
            ParamValue::Str(_) => None,
        }
    }
}

impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Int(i) => write!(f, "{i}"),
            ParamValue::Real(r) => write!(f, "{r}"),
            ParamValue::Str(s) => write!(f, "{s}"),
        }
    }
}

/// Parameter name to value, in space insertion order.
pub type Config = IndexMap<String, ParamValue>;

/// Metric name to finite value.
pub type Metrics = IndexMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrialId(pub String);

impl TrialId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TrialId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TrialId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TrialStatus {
    Pending,
    Running,
    Paused,
    Completed,
    Stopped,
    Errored,
}

impl TrialStatus {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            TrialStatus::Completed | TrialStatus::Stopped | TrialStatus::Errored
        )
    }
}

impl fmt::Display for TrialStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TrialStatus::Pending => "PENDING",
            TrialStatus::Running => "RUNNING",
            TrialStatus::Paused => "PAUSED",
            TrialStatus::Completed => "COMPLETED",
            TrialStatus::Stopped => "STOPPED",
            TrialStatus::Errored => "ERRORED",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LifecycleEvent {
    Start,
    Pause,
    Resume,
    Complete,
    Stop,
    Error,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 6] = [
        LifecycleEvent::Start,
        LifecycleEvent::Pause,
        LifecycleEvent::Resume,
        LifecycleEvent::Complete,
        LifecycleEvent::Stop,
        LifecycleEvent::Error,
    ];
}

/// The legal-transition table. `None` means the pair is illegal.
pub fn next_status(from: TrialStatus, event: LifecycleEvent) -> Option<TrialStatus> {
    use LifecycleEvent as E;
    use TrialStatus as S;
    match (from, event) {
        (S::Pending, E::Start) => Some(S::Running),
        (S::Running, E::Pause) => Some(S::Paused),
        (S::Paused, E::Resume) => Some(S::Running),
        (S::Running, E::Complete) => Some(S::Completed),
        (S::Running, E::Stop) => Some(S::Stopped),
        (S::Running, E::Error) => Some(S::Errored),
        // Rung culling in synchronous HyperBand stops trials while they sit paused.
        (S::Paused, E::Stop) => Some(S::Stopped),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceRequest {
    pub cpus: f64,
    #[serde(default)]
    pub gpus: f64,
}

impl ResourceRequest {
    pub const ZERO: ResourceRequest = ResourceRequest { cpus: 0.0, gpus: 0.0 };

    pub fn new(cpus: f64, gpus: f64) -> Self {
        Self { cpus, gpus }
    }

    pub fn is_valid(&self) -> bool {
        self.cpus.is_finite() && self.gpus.is_finite() && self.cpus >= 0.0 && self.gpus >= 0.0
    }

    pub fn fits_within(&self, free: &ResourceRequest) -> bool {
        self.cpus <= free.cpus && self.gpus <= free.gpus
    }
}

impl Default for ResourceRequest {
    fn default() -> Self {
        Self { cpus: 1.0, gpus: 0.0 }
    }
}

/// One intermediate report from a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub step: u64,
    pub metrics: Metrics,
    #[serde(default)]
    pub wall_time: f64,
}

impl ResultRecord {
    pub fn new(step: u64, metrics: Metrics) -> Self {
        Self {
            step,
            metrics,
            wall_time: 0.0,
        }
    }

    pub fn with_metric(step: u64, name: &str, value: f64) -> Self {
        let mut metrics = Metrics::new();
        metrics.insert(name.to_string(), value);
        Self::new(step, metrics)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Min,
    Max,
}

/// The metric the experiment optimizes and its direction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub metric: String,
    #[serde(default)]
    pub mode: Mode,
}

impl Objective {
    pub fn minimize(metric: impl Into<String>) -> Self {
        Self {
            metric: metric.into(),
            mode: Mode::Min,
        }
    }

    pub fn maximize(metric: impl Into<String>) -> Self {
        Self {
            metric: metric.into(),
            mode: Mode::Max,
        }
    }

    /// Canonical (smaller-is-better) value of a raw metric.
    pub fn canonicalize(&self, raw: f64) -> f64 {
        match self.mode {
            Mode::Min => raw,
            Mode::Max => -raw,
        }
    }

    /// Converts a canonical value back to the metric's own orientation.
    pub fn decanonicalize(&self, canonical: f64) -> f64 {
        self.canonicalize(canonical)
    }

    pub fn canonical_of(&self, metrics: &Metrics) -> Result<f64, TrialError> {
        let raw = metrics
            .get(&self.metric)
            .ok_or_else(|| TrialError::MissingObjectiveMetric(self.metric.clone()))?;
        if !raw.is_finite() {
            return Err(TrialError::NonFiniteMetric(self.metric.clone()));
        }
        Ok(self.canonicalize(*raw))
    }
}

/// Reference to an opaque checkpoint file.
///
/// `step` is in trial numbering. `worker_step` is the step count the worker itself
/// had reached when it wrote the file; the two differ after a clone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointRef {
    pub trial: TrialId,
    pub step: u64,
    pub worker_step: u64,
    pub path: PathBuf,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrialDecision {
    Continue,
    /// Checkpoint, then release resources.
    Pause,
    Stop,
    Restart {
        new_config: Config,
        restore_from: Option<CheckpointRef>,
    },
}

impl TrialDecision {
    pub fn label(&self) -> &'static str {
        match self {
            TrialDecision::Continue => "CONTINUE",
            TrialDecision::Pause => "PAUSE",
            TrialDecision::Stop => "STOP",
            TrialDecision::Restart { .. } => "RESTART",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parent", rename_all = "lowercase")]
pub enum TrialOrigin {
    Initial,
    Suggested,
    Cloned(TrialId),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrialError {
    #[error("illegal transition: {event:?} from {from}")]
    IllegalTransition {
        from: TrialStatus,
        event: LifecycleEvent,
    },
    #[error("non-monotonic step: last step {last}, got {got}")]
    NonMonotonicStep { last: u64, got: u64 },
    #[error("result is missing objective metric `{0}`")]
    MissingObjectiveMetric(String),
    #[error("metric `{0}` is not finite")]
    NonFiniteMetric(String),
    #[error("trial is {0}; only RUNNING trials may report results")]
    NotRunning(TrialStatus),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub id: TrialId,
    pub config: Config,
    pub status: TrialStatus,
    pub results: Vec<ResultRecord>,
    /// Canonical objective of each entry in `results`.
    pub objectives: Vec<f64>,
    pub resources: ResourceRequest,
    /// Retained checkpoints, oldest first.
    pub checkpoints: Vec<CheckpointRef>,
    pub bracket_tag: Option<String>,
    pub origin: TrialOrigin,
    /// Added to worker-reported steps so a cloned worker continues this trial's numbering.
    #[serde(default)]
    pub step_offset: i64,
    #[serde(default)]
    pub error: Option<String>,
}

impl Trial {
    pub fn new(id: TrialId, config: Config, resources: ResourceRequest, origin: TrialOrigin) -> Self {
        Self {
            id,
            config,
            status: TrialStatus::Pending,
            results: Vec::new(),
            objectives: Vec::new(),
            resources,
            checkpoints: Vec::new(),
            bracket_tag: None,
            origin,
            step_offset: 0,
            error: None,
        }
    }

    pub fn apply_transition(&mut self, event: LifecycleEvent) -> Result<TrialStatus, TrialError> {
        let next = next_status(self.status, event).ok_or(TrialError::IllegalTransition {
            from: self.status,
            event,
        })?;
        self.status = next;
        Ok(next)
    }

    /// Appends a result after validating it; returns the canonical objective.
    pub fn record_result(
        &mut self,
        record: ResultRecord,
        objective: &Objective,
    ) -> Result<f64, TrialError> {
        if self.status != TrialStatus::Running {
            return Err(TrialError::NotRunning(self.status));
        }
        if let Some((name, _)) = record.metrics.iter().find(|(_, v)| !v.is_finite()) {
            return Err(TrialError::NonFiniteMetric(name.clone()));
        }
        let canonical = objective.canonical_of(&record.metrics)?;
        if let Some(last) = self.last_step() {
            if record.step <= last {
                return Err(TrialError::NonMonotonicStep {
                    last,
                    got: record.step,
                });
            }
        } else if record.step == 0 {
            return Err(TrialError::NonMonotonicStep { last: 0, got: 0 });
        }
        self.results.push(record);
        self.objectives.push(canonical);
        Ok(canonical)
    }

    pub fn last_step(&self) -> Option<u64> {
        self.results.last().map(|r| r.step)
    }

    pub fn latest_checkpoint(&self) -> Option<&CheckpointRef> {
        self.checkpoints.last()
    }

    pub fn latest_objective(&self) -> Option<f64> {
        self.objectives.last().copied()
    }

    pub fn best_objective(&self) -> Option<f64> {
        self.objectives.iter().copied().reduce(f64::min)
    }

    /// Value used for ranking inside schedulers: errored trials rank after everything.
    pub fn ranking_objective(&self) -> f64 {
        if self.status == TrialStatus::Errored {
            return f64::INFINITY;
        }
        self.latest_objective().unwrap_or(f64::INFINITY)
    }

    /// Canonical objectives of results with `step <= up_to`.
    pub fn objectives_up_to(&self, up_to: u64) -> impl Iterator<Item = f64> + '_ {
        self.results
            .iter()
            .zip(&self.objectives)
            .take_while(move |(r, _)| r.step <= up_to)
            .map(|(_, o)| *o)
    }

    /// Drops results past `step`; used when a trial is rolled back to a checkpoint.
    pub fn truncate_after(&mut self, step: u64) {
        let keep = self.results.iter().take_while(|r| r.step <= step).count();
        self.results.truncate(keep);
        self.objectives.truncate(keep);
        self.checkpoints.retain(|c| c.step <= step);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trial() -> Trial {
        Trial::new(
            TrialId::new("t1"),
            Config::new(),
            ResourceRequest::default(),
            TrialOrigin::Initial,
        )
    }

    #[test]
    fn start_from_pending() {
        let mut t = trial();
        assert_eq!(t.apply_transition(LifecycleEvent::Start), Ok(TrialStatus::Running));
    }

    #[test]
    fn terminal_rejects_start() {
        let mut t = trial();
        t.status = TrialStatus::Completed;
        assert_eq!(
            t.apply_transition(LifecycleEvent::Start),
            Err(TrialError::IllegalTransition {
                from: TrialStatus::Completed,
                event: LifecycleEvent::Start
            })
        );
    }

    #[test]
    fn pause_resume_round_trip() {
        let mut t = trial();
        t.apply_transition(LifecycleEvent::Start).unwrap();
        t.apply_transition(LifecycleEvent::Pause).unwrap();
        assert_eq!(t.apply_transition(LifecycleEvent::Resume), Ok(TrialStatus::Running));
    }

    #[test]
    fn paused_trial_can_be_stopped() {
        let mut t = trial();
        t.apply_transition(LifecycleEvent::Start).unwrap();
        t.apply_transition(LifecycleEvent::Pause).unwrap();
        assert_eq!(t.apply_transition(LifecycleEvent::Stop), Ok(TrialStatus::Stopped));
    }

    #[test]
    fn record_result_rules() {
        let obj = Objective::minimize("loss");
        let mut t = trial();
        t.apply_transition(LifecycleEvent::Start).unwrap();
        t.record_result(ResultRecord::with_metric(3, "loss", 0.5), &obj).unwrap();
        assert!(t.record_result(ResultRecord::with_metric(4, "loss", 0.4), &obj).is_ok());
        assert_eq!(
            t.record_result(ResultRecord::with_metric(4, "loss", 0.3), &obj),
            Err(TrialError::NonMonotonicStep { last: 4, got: 4 })
        );
        assert_eq!(
            t.record_result(ResultRecord::with_metric(5, "acc", 0.3), &obj),
            Err(TrialError::MissingObjectiveMetric("loss".into()))
        );
        assert_eq!(
            t.record_result(ResultRecord::with_metric(5, "loss", f64::NAN), &obj),
            Err(TrialError::NonFiniteMetric("loss".into()))
        );
        assert_eq!(t.results.len(), 2);
    }

    #[test]
    fn only_running_trials_report() {
        let obj = Objective::minimize("loss");
        let mut t = trial();
        assert_eq!(
            t.record_result(ResultRecord::with_metric(1, "loss", 0.5), &obj),
            Err(TrialError::NotRunning(TrialStatus::Pending))
        );
    }

    #[test]
    fn max_mode_negates() {
        let obj = Objective::maximize("acc");
        let mut t = trial();
        t.apply_transition(LifecycleEvent::Start).unwrap();
        assert_eq!(t.record_result(ResultRecord::with_metric(1, "acc", 0.8), &obj), Ok(-0.8));
        t.apply_transition(LifecycleEvent::Error).unwrap();
        assert_eq!(t.ranking_objective(), f64::INFINITY);
        assert_eq!(t.latest_objective(), Some(-0.8));
    }

    fn event() -> impl Strategy<Value = LifecycleEvent> {
        (0usize..6).prop_map(|i| LifecycleEvent::ALL[i])
    }

    proptest! {
        #[test]
        fn random_event_streams_follow_the_table(events in prop::collection::vec(event(), 0..40)) {
            let mut t = trial();
            let mut history = vec![t.status];
            for ev in events {
                let before = t.status;
                match t.apply_transition(ev) {
                    Ok(after) => {
                        prop_assert_eq!(Some(after), next_status(before, ev));
                        prop_assert!(!before.is_terminal());
                        history.push(after);
                    }
                    Err(_) => prop_assert_eq!(t.status, before),
                }
            }
            if let Some(pos) = history.iter().position(|s| s.is_terminal()) {
                prop_assert_eq!(pos, history.len() - 1);
            }
        }

        #[test]
        fn accepted_results_are_strictly_increasing(steps in prop::collection::vec(0u64..50, 0..40)) {
            let obj = Objective::minimize("loss");
            let mut t = trial();
            t.apply_transition(LifecycleEvent::Start).unwrap();
            for s in steps {
                let _ = t.record_result(ResultRecord::with_metric(s, "loss", 1.0), &obj);
            }
            prop_assert!(t.results.windows(2).all(|w| w[0].step < w[1].step));
            prop_assert_eq!(t.results.len(), t.objectives.len());
        }
    }
}
