//! Trial schedulers.
//!
//! The engine calls [`TrialScheduler::choose_trial_to_run`] whenever resources
//! are free and [`TrialScheduler::on_result`] for every intermediate result.
//! Schedulers see the experiment through a [`TrialPoolView`], a read-only
//! snapshot that also collects side requests (stop a paused trial, enqueue a
//! new configuration, tag a trial).

mod asha;
mod fifo;
mod hyperband;
mod median;
mod pbt;
mod suggest;

pub use asha::{asha_milestones, AshaConfig, AshaScheduler, RungRecord};
pub use fifo::FifoScheduler;
pub use hyperband::{hyperband_brackets, Bracket, HyperBandConfig, HyperBandScheduler, Rung};
pub use median::{median_decision, MedianStoppingConfig, MedianStoppingRule};
pub use pbt::{explore, PbtConfig, PbtScheduler};
pub use suggest::{RandomSearch, SuggestionSource};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::space::ParamSpace;
use crate::trial::{Config, ResourceRequest, ResultRecord, Trial, TrialDecision, TrialId, TrialStatus};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error("trial {0} was never assigned to a bracket")]
    TrialWithoutBracket(TrialId),
    #[error("invalid scheduler configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot import scheduler state: {0}")]
    State(String),
}

/// Requests a scheduler issued while handling an event. The engine applies them
/// right after the call returns.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PoolActions {
    pub stop: Vec<TrialId>,
    pub suggest: Vec<Config>,
    pub annotate: Vec<(TrialId, String)>,
}

impl PoolActions {
    pub fn is_empty(&self) -> bool {
        self.stop.is_empty() && self.suggest.is_empty() && self.annotate.is_empty()
    }
}

/// Consistent view of every trial, taken between engine events.
pub struct TrialPoolView<'a> {
    trials: &'a [Trial],
    free: ResourceRequest,
    actions: PoolActions,
}

impl<'a> TrialPoolView<'a> {
    pub fn new(trials: &'a [Trial], free: ResourceRequest) -> Self {
        Self {
            trials,
            free,
            actions: PoolActions::default(),
        }
    }

    /// All trials in submission order.
    pub fn trials(&self) -> &'a [Trial] {
        self.trials
    }

    pub fn get(&self, id: &TrialId) -> Option<&'a Trial> {
        self.trials.iter().find(|t| &t.id == id)
    }

    pub fn free(&self) -> ResourceRequest {
        self.free
    }

    pub fn fits(&self, trial: &Trial) -> bool {
        trial.resources.fits_within(&self.free)
    }

    /// First trial in submission order that is runnable, fits, and satisfies `pred`.
    pub fn first_fit(&self, mut pred: impl FnMut(&Trial) -> bool) -> Option<&'a Trial> {
        self.trials.iter().find(|t| {
            matches!(t.status, TrialStatus::Pending | TrialStatus::Paused) && self.fits(t) && pred(t)
        })
    }

    /// Asks the engine to stop a trial that is not the one currently reporting.
    pub fn request_stop(&mut self, id: TrialId) {
        if !self.actions.stop.contains(&id) {
            self.actions.stop.push(id);
        }
    }

    /// Enqueues a new trial configuration.
    pub fn suggest(&mut self, config: Config) {
        self.actions.suggest.push(config);
    }

    pub fn annotate(&mut self, id: TrialId, tag: impl Into<String>) {
        self.actions.annotate.push((id, tag.into()));
    }

    pub fn actions(&self) -> &PoolActions {
        &self.actions
    }

    pub fn into_actions(self) -> PoolActions {
        self.actions
    }
}

/// The scheduling interface.
pub trait TrialScheduler: Send {
    fn name(&self) -> &'static str;

    /// Called once per trial when it joins the experiment.
    fn on_trial_add(&mut self, _trial: &Trial, _pool: &mut TrialPoolView<'_>) {}

    /// Called with the reporting trial after `result` was appended to its history.
    fn on_result(
        &mut self,
        trial: &Trial,
        result: &ResultRecord,
        pool: &mut TrialPoolView<'_>,
    ) -> Result<TrialDecision, SchedulerError>;

    /// Called when the engine completes a trial through its own stopping criteria.
    fn on_trial_complete(&mut self, _trial: &Trial, _pool: &mut TrialPoolView<'_>) {}

    /// Called when a trial's worker fails.
    fn on_trial_error(&mut self, _trial: &Trial, _pool: &mut TrialPoolView<'_>) {}

    /// A PENDING or PAUSED trial that fits the free resources, or `None`.
    fn choose_trial_to_run(&mut self, pool: &TrialPoolView<'_>) -> Option<TrialId>;

    /// Largest per-trial step count the scheduler plans for, if any.
    fn max_resource(&self) -> Option<u64> {
        None
    }

    /// Step interval at which running trials should be checkpointed.
    fn checkpoint_interval(&self) -> Option<u64> {
        None
    }

    fn export_state(&self) -> Value;

    fn import_state(&mut self, state: Value) -> Result<(), SchedulerError>;
}

/// Scheduler selection as it appears in the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
#[derive(Default)]
pub enum SchedulerConfig {
    #[default]
    Fifo,
    Median(MedianStoppingConfig),
    Asha(AshaConfig),
    Hyperband(HyperBandConfig),
    Pbt(PbtConfig),
}


impl SchedulerConfig {
    pub const KINDS: [&'static str; 5] = ["fifo", "median", "asha", "hyperband", "pbt"];

    pub fn kind(&self) -> &'static str {
        match self {
            SchedulerConfig::Fifo => "fifo",
            SchedulerConfig::Median(_) => "median",
            SchedulerConfig::Asha(_) => "asha",
            SchedulerConfig::Hyperband(_) => "hyperband",
            SchedulerConfig::Pbt(_) => "pbt",
        }
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        match self {
            SchedulerConfig::Fifo => Ok(()),
            SchedulerConfig::Median(c) => c.validate(),
            SchedulerConfig::Asha(c) => c.validate(),
            SchedulerConfig::Hyperband(c) => c.validate(),
            SchedulerConfig::Pbt(c) => c.validate(),
        }
    }

    /// Builds the scheduler. `seed` feeds schedulers that draw random numbers
    /// when their own config leaves the seed unset.
    pub fn build(
        &self,
        space: &ParamSpace,
        seed: u64,
    ) -> Result<Box<dyn TrialScheduler>, SchedulerError> {
        self.validate()?;
        Ok(match self {
            SchedulerConfig::Fifo => Box::new(FifoScheduler::new()),
            SchedulerConfig::Median(c) => Box::new(MedianStoppingRule::new(c.clone())),
            SchedulerConfig::Asha(c) => Box::new(AshaScheduler::new(c.clone())),
            SchedulerConfig::Hyperband(c) => Box::new(HyperBandScheduler::new(c.clone())),
            SchedulerConfig::Pbt(c) => Box::new(PbtScheduler::new(c.clone(), space.clone(), seed)),
        })
    }
}

/// Sort key that ranks trials by value, then by id.
pub(crate) fn rank_key(value: f64, id: &TrialId) -> (OrderedValue, &TrialId) {
    (OrderedValue(value), id)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct OrderedValue(pub f64);

impl Eq for OrderedValue {}

impl PartialOrd for OrderedValue {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrderedValue {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        crate::num::total_cmp(&self.0, &other.0)
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::trial::{TrialStatus, TrialDecision};
    use testing::trial_with;

    #[test]
    fn unknown_kind_is_rejected() {
        let err = serde_json::from_str::<SchedulerConfig>(r#"{"kind":"foo"}"#).unwrap_err();
        assert!(err.to_string().contains("foo"));
    }

    #[test]
    fn config_defaults_fill_in() {
        let cfg: SchedulerConfig =
            serde_json::from_str(r#"{"kind":"asha","max_resource":9}"#).unwrap();
        assert_eq!(
            cfg,
            SchedulerConfig::Asha(AshaConfig {
                min_resource: 1,
                max_resource: 9,
                reduction_factor: 3
            })
        );
        let cfg: SchedulerConfig = serde_json::from_str(r#"{"kind":"pbt"}"#).unwrap();
        let SchedulerConfig::Pbt(p) = cfg else { panic!() };
        assert_eq!(p.perturbation_interval, 4);
        assert_eq!(p.quantile_fraction, 0.25);
        assert_eq!(p.resample_probability, 0.25);
        assert_eq!(p.perturbation_factors, (0.8, 1.2));
    }

    #[test]
    fn first_fit_skips_running_and_oversized() {
        let mut big = trial_with("t1", TrialStatus::Pending, &[]);
        big.resources = ResourceRequest::new(2.0, 0.0);
        let running = trial_with("t0", TrialStatus::Running, &[1.0]);
        let small = trial_with("t2", TrialStatus::Pending, &[]);
        let trials = vec![running, big, small];
        let pool = TrialPoolView::new(&trials, ResourceRequest::new(1.0, 0.0));
        assert_eq!(pool.first_fit(|_| true).map(|t| t.id.as_str()), Some("t2"));
    }

    #[test]
    fn every_scheduler_builds() {
        let space = ParamSpace::new();
        for text in [
            r#"{"kind":"fifo"}"#,
            r#"{"kind":"median"}"#,
            r#"{"kind":"asha","max_resource":9}"#,
            r#"{"kind":"hyperband","max_resource":27}"#,
            r#"{"kind":"pbt"}"#,
        ] {
            let cfg: SchedulerConfig = serde_json::from_str(text).unwrap();
            let mut s = cfg.build(&space, 0).unwrap();
            assert_eq!(s.name(), cfg.kind());
            let t = trial_with("t1", TrialStatus::Running, &[0.5]);
            let trials = vec![t.clone()];
            let mut pool = TrialPoolView::new(&trials, ResourceRequest::new(1.0, 0.0));
            if cfg.kind() != "hyperband" {
                let d = s.on_result(&t, &t.results[0], &mut pool).unwrap();
                assert_eq!(d, TrialDecision::Continue);
            }
        }
    }

    #[test]
    fn invalid_configs_fail_validation() {
        for text in [
            r#"{"kind":"median","grace_period":0}"#,
            r#"{"kind":"asha","max_resource":9,"reduction_factor":1}"#,
            r#"{"kind":"asha","min_resource":10,"max_resource":9}"#,
            r#"{"kind":"hyperband","max_resource":0}"#,
            r#"{"kind":"pbt","quantile_fraction":0.75}"#,
            r#"{"kind":"pbt","perturbation_factors":[1.0,1.0]}"#,
        ] {
            let cfg: SchedulerConfig = serde_json::from_str(text).unwrap();
            assert!(cfg.validate().is_err(), "{text}");
        }
    }
}
