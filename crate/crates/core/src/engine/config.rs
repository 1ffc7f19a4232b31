use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::checkpoint::DEFAULT_KEEP_LAST;
use crate::executor::TrainableSpec;
use crate::scheduler::SchedulerConfig;
use crate::space::ParamSpace;
use crate::trial::{Objective, ResourceRequest};

pub const DEFAULT_SNAPSHOT_INTERVAL: u64 = 10;

/// A config error with the JSON path of the offending field.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn at(path: &str, message: impl Into<String>) -> Self {
        Self {
            path: path.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct ResourceConfig {
    #[serde(default)]
    pub total: ResourceRequest,
    #[serde(default)]
    pub per_trial: ResourceRequest,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoppingCriteria {
    pub max_steps_per_trial: u64,
    /// Canonical (minimize) objective at or below which a trial is complete.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_total_trials: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SuggestionConfig {
    /// Trials come from expanding the grid once at start.
    #[default]
    None,
    /// Configurations are sampled from the space as capacity frees up.
    Random {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max_trials: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointConfig {
    /// Save running trials every this many steps, in addition to any interval
    /// the scheduler asks for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<u64>,
    #[serde(default = "default_keep_last")]
    pub keep_last: usize,
}

fn default_keep_last() -> usize {
    DEFAULT_KEEP_LAST
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self {
            interval: None,
            keep_last: DEFAULT_KEEP_LAST,
        }
    }
}

fn default_objective() -> Objective {
    Objective::minimize("loss")
}

fn default_snapshot_interval() -> u64 {
    DEFAULT_SNAPSHOT_INTERVAL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub trainable: TrainableSpec,
    #[serde(default)]
    pub space: ParamSpace,
    #[serde(default = "default_objective")]
    pub objective: Objective,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub resources: ResourceConfig,
    pub stopping: StoppingCriteria,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub suggestion: SuggestionConfig,
    #[serde(default)]
    pub checkpoint: CheckpointConfig,
    #[serde(default = "default_snapshot_interval")]
    pub snapshot_interval: u64,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::at(if path == "." { "config" } else { &path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.trim().is_empty() {
            return Err(ConfigError::at("name", "must not be empty"));
        }
        if let TrainableSpec::Command { cmd, .. } = &self.trainable {
            if cmd.is_empty() {
                return Err(ConfigError::at("trainable.cmd", "argv must not be empty"));
            }
        }
        if self.objective.metric.is_empty() {
            return Err(ConfigError::at("objective.metric", "must not be empty"));
        }
        self.scheduler
            .validate()
            .map_err(|e| ConfigError::at("scheduler", e.to_string()))?;
        let ResourceConfig { total, per_trial } = &self.resources;
        if !total.is_valid() {
            return Err(ConfigError::at("resources.total", "must be finite and non-negative"));
        }
        if !per_trial.is_valid() {
            return Err(ConfigError::at("resources.per_trial", "must be finite and non-negative"));
        }
        if !per_trial.fits_within(total) {
            return Err(ConfigError::at(
                "resources.per_trial",
                format!(
                    "request {{cpus: {}, gpus: {}}} exceeds total {{cpus: {}, gpus: {}}}",
                    per_trial.cpus, per_trial.gpus, total.cpus, total.gpus
                ),
            ));
        }
        if self.stopping.max_steps_per_trial < 1 {
            return Err(ConfigError::at("stopping.max_steps_per_trial", "must be >= 1"));
        }
        if self.stopping.objective_threshold.is_some_and(|t| !t.is_finite()) {
            return Err(ConfigError::at("stopping.objective_threshold", "must be finite"));
        }
        match &self.suggestion {
            SuggestionConfig::None => {
                if !self.space.is_grid_only() {
                    return Err(ConfigError::at(
                        "space",
                        "non-grid domains need a suggestion source (suggestion.kind = random)",
                    ));
                }
            }
            SuggestionConfig::Random { max_trials } => {
                if max_trials.is_none() && self.stopping.max_total_trials.is_none() {
                    return Err(ConfigError::at(
                        "suggestion.max_trials",
                        "random suggestion needs max_trials or stopping.max_total_trials",
                    ));
                }
            }
        }
        if self.checkpoint.interval == Some(0) {
            return Err(ConfigError::at("checkpoint.interval", "must be >= 1"));
        }
        if self.checkpoint.keep_last < 1 {
            return Err(ConfigError::at("checkpoint.keep_last", "must be >= 1"));
        }
        if self.snapshot_interval < 1 {
            return Err(ConfigError::at("snapshot_interval", "must be >= 1"));
        }
        Ok(())
    }

    /// Step budget per trial after applying the scheduler's own maximum.
    pub fn effective_max_steps(&self, scheduler_max: Option<u64>) -> u64 {
        match scheduler_max {
            Some(r) => self.stopping.max_steps_per_trial.min(r),
            None => self.stopping.max_steps_per_trial,
        }
    }

    /// Cap on suggested trials, counting every trial in the experiment.
    pub fn trial_budget(&self) -> Option<usize> {
        let suggested = match &self.suggestion {
            SuggestionConfig::None => None,
            SuggestionConfig::Random { max_trials } => *max_trials,
        };
        match (suggested, self.stopping.max_total_trials) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GRID: &str = r#"{
        "name": "grid",
        "trainable": "sim:exp-curve",
        "space": {"final_loss": {"grid": [0.3, 0.1, 0.2]}, "tau": {"grid": [1.0, 2.0]}},
        "objective": {"metric": "loss", "mode": "min"},
        "scheduler": {"kind": "fifo"},
        "resources": {"total": {"cpus": 2}, "per_trial": {"cpus": 1}},
        "stopping": {"max_steps_per_trial": 3},
        "seed": 7,
        "output_dir": "out"
    }"#;

    fn with(patch: &str, value: serde_json::Value) -> String {
        let mut v: serde_json::Value = serde_json::from_str(GRID).unwrap();
        v[patch] = value;
        v.to_string()
    }

    #[test]
    fn parses_grid_config() {
        let cfg = ExperimentConfig::from_json_str(GRID).unwrap();
        assert_eq!(cfg.space.len(), 2);
        assert_eq!(cfg.snapshot_interval, 10);
        assert_eq!(cfg.checkpoint.keep_last, 2);
        assert_eq!(cfg.suggestion, SuggestionConfig::None);
    }

    #[test]
    fn unknown_scheduler_names_field() {
        let err = ExperimentConfig::from_json_str(&with("scheduler", serde_json::json!({"kind": "foo"})))
            .unwrap_err();
        assert_eq!(err.path, "scheduler.kind");
        assert!(err.message.contains("foo"), "{err}");
    }

    #[test]
    fn oversized_request_rejected() {
        let err = ExperimentConfig::from_json_str(&with(
            "resources",
            serde_json::json!({"total": {"cpus": 2}, "per_trial": {"cpus": 4}}),
        ))
        .unwrap_err();
        assert_eq!(err.path, "resources.per_trial");
    }

    #[test]
    fn bad_mode_rejected() {
        let err = ExperimentConfig::from_json_str(&with(
            "objective",
            serde_json::json!({"metric": "loss", "mode": "up"}),
        ))
        .unwrap_err();
        assert_eq!(err.path, "objective.mode");
    }

    #[test]
    fn unknown_top_level_key_rejected() {
        assert!(ExperimentConfig::from_json_str(&with("colour", serde_json::json!(1))).is_err());
    }

    #[test]
    fn random_suggestion_needs_budget() {
        let space = serde_json::json!({"x": {"uniform": [0.0, 1.0]}});
        let mut v: serde_json::Value = serde_json::from_str(GRID).unwrap();
        v["space"] = space;
        assert_eq!(ExperimentConfig::from_json_str(&v.to_string()).unwrap_err().path, "space");
        v["suggestion"] = serde_json::json!({"kind": "random"});
        assert_eq!(
            ExperimentConfig::from_json_str(&v.to_string()).unwrap_err().path,
            "suggestion.max_trials"
        );
        v["suggestion"] = serde_json::json!({"kind": "random", "max_trials": 4});
        let cfg = ExperimentConfig::from_json_str(&v.to_string()).unwrap();
        assert_eq!(cfg.trial_budget(), Some(4));
    }

    fn arb_scheduler() -> impl Strategy<Value = serde_json::Value> {
        prop_oneof![
            Just(serde_json::json!({"kind": "fifo"})),
            (1u64..5, 1usize..4).prop_map(|(g, m)| serde_json::json!({"kind": "median", "grace_period": g, "min_comparison_trials": m})),
            (1u64..4, 2u64..5).prop_map(|(r, eta)| serde_json::json!({"kind": "asha", "min_resource": r, "max_resource": r * 27, "reduction_factor": eta})),
            (1u64..100, 2u64..5).prop_map(|(r, eta)| serde_json::json!({"kind": "hyperband", "max_resource": r, "reduction_factor": eta})),
            (1u64..10, 0.05f64..0.5).prop_map(|(i, q)| serde_json::json!({"kind": "pbt", "perturbation_interval": i, "quantile_fraction": q})),
        ]
    }

    proptest! {
        #[test]
        fn config_round_trip(
            scheduler in arb_scheduler(),
            cpus in 1u32..16,
            steps in 1u64..100,
            seed in any::<u64>(),
            grid in prop::collection::vec(-1e6f64..1e6, 1..5),
            maximize in any::<bool>(),
            threshold in prop::option::of(-10.0f64..10.0),
        ) {
            let v = serde_json::json!({
                "name": "p",
                "trainable": {"cmd": ["python3", "train.py"], "env": {"A": "1"}},
                "space": {"x": {"grid": grid}, "c": 3},
                "objective": {"metric": "acc", "mode": if maximize { "max" } else { "min" }},
                "scheduler": scheduler,
                "resources": {"total": {"cpus": cpus, "gpus": 1}, "per_trial": {"cpus": 1}},
                "stopping": {"max_steps_per_trial": steps, "objective_threshold": threshold},
                "seed": seed,
                "output_dir": "runs/p",
            });
            let first = ExperimentConfig::from_json_str(&v.to_string()).unwrap();
            let second = ExperimentConfig::from_json_str(&first.to_json_string()).unwrap();
            prop_assert_eq!(&first, &second);
            prop_assert_eq!(first.to_json_string(), second.to_json_string());
        }
    }
}
