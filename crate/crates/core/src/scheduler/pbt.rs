//! Population-based training: at every perturbation interval a trial in the
//! bottom quantile clones the checkpoint of a trial in the top quantile and
//! continues with a perturbed copy of that trial's hyperparameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{rank_key, SchedulerError, TrialPoolView, TrialScheduler};
use crate::num::clamp;
use crate::rng::DeterministicRng;
use crate::space::{ParamDomain, ParamSpace};
use crate::trial::{Config, ParamValue, ResultRecord, Trial, TrialDecision, TrialId, TrialStatus};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PbtConfig {
    #[serde(default = "default_interval")]
    pub perturbation_interval: u64,
    #[serde(default = "default_quantile")]
    pub quantile_fraction: f64,
    #[serde(default = "default_quantile")]
    pub resample_probability: f64,
    #[serde(default = "default_factors")]
    pub perturbation_factors: (f64, f64),
    /// Falls back to the experiment seed when unset.
    #[serde(default)]
    pub rng_seed: Option<u64>,
}

fn default_interval() -> u64 {
    4
}

fn default_quantile() -> f64 {
    0.25
}

fn default_factors() -> (f64, f64) {
    (0.8, 1.2)
}

impl Default for PbtConfig {
    fn default() -> Self {
        Self {
            perturbation_interval: default_interval(),
            quantile_fraction: default_quantile(),
            resample_probability: default_quantile(),
            perturbation_factors: default_factors(),
            rng_seed: None,
        }
    }
}

impl PbtConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        let bad = |m: &str| Err(SchedulerError::InvalidConfig(format!("pbt: {m}")));
        if self.perturbation_interval == 0 {
            return bad("perturbation_interval must be >= 1");
        }
        if !(self.quantile_fraction > 0.0 && self.quantile_fraction <= 0.5) {
            return bad("quantile_fraction must be in (0, 0.5]");
        }
        if !(0.0..=1.0).contains(&self.resample_probability) {
            return bad("resample_probability must be in [0, 1]");
        }
        let (a, b) = self.perturbation_factors;
        if !(a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0) || a == b {
            return bad("perturbation_factors must be two distinct positive numbers");
        }
        Ok(())
    }
}

/// Perturbs `config` within `space`. Draws are taken in space order; each
/// perturbable parameter consumes exactly two unit draws.
pub fn explore(
    config: &Config,
    space: &ParamSpace,
    cfg: &PbtConfig,
    rng: &mut DeterministicRng,
) -> Config {
    let mut out = config.clone();
    for (name, domain) in space.iter() {
        let Some(current) = config.get(name) else {
            continue;
        };
        let next = match domain {
            ParamDomain::Uniform { lo, hi } | ParamDomain::LogUniform { lo, hi } => {
                let resample = rng.unit() < cfg.resample_probability;
                let u = rng.unit();
                if resample {
                    domain.value_from_unit(u)
                } else {
                    let factor = if u < 0.5 {
                        cfg.perturbation_factors.0
                    } else {
                        cfg.perturbation_factors.1
                    };
                    match current.as_f64() {
                        Some(v) => ParamValue::Real(clamp(v * factor, *lo, *hi)),
                        None => domain.value_from_unit(u),
                    }
                }
            }
            ParamDomain::Choice(_) | ParamDomain::Grid(_) => {
                let resample = rng.unit() < cfg.resample_probability;
                let u = rng.unit();
                if resample {
                    domain.value_from_unit(u)
                } else {
                    current.clone()
                }
            }
            ParamDomain::Constant(v) => v.clone(),
        };
        out.insert(name.clone(), next);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PbtState {
    last_perturb: BTreeMap<TrialId, u64>,
    rng: DeterministicRng,
}

#[derive(Debug, Clone)]
pub struct PbtScheduler {
    cfg: PbtConfig,
    space: ParamSpace,
    state: PbtState,
}

impl PbtScheduler {
    pub fn new(cfg: PbtConfig, space: ParamSpace, experiment_seed: u64) -> Self {
        let seed = cfg.rng_seed.unwrap_or(experiment_seed);
        Self {
            cfg,
            space,
            state: PbtState {
                last_perturb: BTreeMap::new(),
                rng: DeterministicRng::with_stream(seed, 0x9b7),
            },
        }
    }
}

impl TrialScheduler for PbtScheduler {
    fn name(&self) -> &'static str {
        "pbt"
    }

    fn on_result(
        &mut self,
        trial: &Trial,
        result: &ResultRecord,
        pool: &mut TrialPoolView<'_>,
    ) -> Result<TrialDecision, SchedulerError> {
        let last = self.state.last_perturb.get(&trial.id).copied().unwrap_or(0);
        if result.step < last + self.cfg.perturbation_interval {
            return Ok(TrialDecision::Continue);
        }
        self.state.last_perturb.insert(trial.id.clone(), result.step);

        let mut population: Vec<&Trial> = pool
            .trials()
            .iter()
            .filter(|t| !t.status.is_terminal() && !t.results.is_empty())
            .collect();
        population.sort_by(|a, b| {
            rank_key(a.ranking_objective(), &a.id).cmp(&rank_key(b.ranking_objective(), &b.id))
        });
        let n = population.len();
        if n < 2 {
            return Ok(TrialDecision::Continue);
        }
        let c = ((self.cfg.quantile_fraction * n as f64).floor() as usize).max(1);
        let Some(rank) = population.iter().position(|t| t.id == trial.id) else {
            return Ok(TrialDecision::Continue);
        };
        if rank < n - c {
            return Ok(TrialDecision::Continue);
        }
        let source = population[self.state.rng.index(c)];
        let Some(checkpoint) = source.latest_checkpoint() else {
            return Ok(TrialDecision::Continue);
        };
        let new_config = explore(&source.config, &self.space, &self.cfg, &mut self.state.rng);
        Ok(TrialDecision::Restart {
            new_config,
            restore_from: Some(checkpoint.clone()),
        })
    }

    fn choose_trial_to_run(&mut self, pool: &TrialPoolView<'_>) -> Option<TrialId> {
        pool.first_fit(|t| t.status != TrialStatus::Paused || t.latest_checkpoint().is_some())
            .map(|t| t.id.clone())
    }

    fn checkpoint_interval(&self) -> Option<u64> {
        Some(self.cfg.perturbation_interval)
    }

    fn export_state(&self) -> Value {
        serde_json::to_value(&self.state).expect("state serializes")
    }

    fn import_state(&mut self, state: Value) -> Result<(), SchedulerError> {
        self.state =
            serde_json::from_value(state).map_err(|e| SchedulerError::State(e.to_string()))?;
        Ok(())
    }
}
