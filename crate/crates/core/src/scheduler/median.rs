use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{SchedulerError, TrialPoolView, TrialScheduler};
use crate::num::{mean, median};
use crate::trial::{ResultRecord, Trial, TrialDecision, TrialId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MedianStoppingConfig {
    #[serde(default = "one")]
    pub grace_period: u64,
    #[serde(default = "two")]
    pub min_comparison_trials: usize,
}

fn one() -> u64 {
    1
}

fn two() -> usize {
    2
}

impl Default for MedianStoppingConfig {
    fn default() -> Self {
        Self {
            grace_period: 1,
            min_comparison_trials: 2,
        }
    }
}

impl MedianStoppingConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.grace_period == 0 || self.min_comparison_trials == 0 {
            return Err(SchedulerError::InvalidConfig(
                "median: grace_period and min_comparison_trials must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Stops `trial` once its best value so far is worse than the median of the
/// other trials' running averages at the same step.
pub fn median_decision<'a>(
    trial: &Trial,
    step: u64,
    others: impl IntoIterator<Item = &'a Trial>,
    cfg: &MedianStoppingConfig,
) -> TrialDecision {
    if step < cfg.grace_period {
        return TrialDecision::Continue;
    }
    let averages: Vec<f64> = others
        .into_iter()
        .filter(|o| o.id != trial.id)
        .filter_map(|o| mean(&o.objectives_up_to(step).collect::<Vec<_>>()))
        .collect();
    if averages.len() < cfg.min_comparison_trials {
        return TrialDecision::Continue;
    }
    let (Some(cutoff), Some(best)) = (
        median(&averages),
        trial.objectives_up_to(step).reduce(f64::min),
    ) else {
        return TrialDecision::Continue;
    };
    if best > cutoff {
        TrialDecision::Stop
    } else {
        TrialDecision::Continue
    }
}

#[derive(Debug, Clone)]
pub struct MedianStoppingRule {
    cfg: MedianStoppingConfig,
}

impl MedianStoppingRule {
    pub fn new(cfg: MedianStoppingConfig) -> Self {
        Self { cfg }
    }
}

impl TrialScheduler for MedianStoppingRule {
    fn name(&self) -> &'static str {
        "median"
    }

    fn on_result(
        &mut self,
        trial: &Trial,
        result: &ResultRecord,
        pool: &mut TrialPoolView<'_>,
    ) -> Result<TrialDecision, SchedulerError> {
        Ok(median_decision(trial, result.step, pool.trials(), &self.cfg))
    }

    fn choose_trial_to_run(&mut self, pool: &TrialPoolView<'_>) -> Option<TrialId> {
        pool.first_fit(|_| true).map(|t| t.id.clone())
    }

    fn export_state(&self) -> Value {
        json!({})
    }

    fn import_state(&mut self, _state: Value) -> Result<(), SchedulerError> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::testing::trial_with;
    use crate::trial::TrialStatus;
    use proptest::prelude::*;

    fn defaults() -> MedianStoppingConfig {
        MedianStoppingConfig::default()
    }

    #[test]
    fn hand_computed_stop() {
        // averages 0.95 and 0.45, median 0.70; C's best 0.94 is worse.
        let a = trial_with("A", TrialStatus::Completed, &[1.0, 0.9]);
        let b = trial_with("B", TrialStatus::Completed, &[0.5, 0.4]);
        let c = trial_with("C", TrialStatus::Running, &[0.98, 0.94]);
        let pool = [a, b, c.clone()];
        assert_eq!(median_decision(&c, 2, &pool, &defaults()), TrialDecision::Stop);
    }

    #[test]
    fn single_comparison_trial_continues() {
        let a = trial_with("A", TrialStatus::Completed, &[0.1, 0.1]);
        let c = trial_with("C", TrialStatus::Running, &[5.0, 5.0]);
        let pool = [a, c.clone()];
        assert_eq!(median_decision(&c, 2, &pool, &defaults()), TrialDecision::Continue);
    }

    #[test]
    fn equal_to_median_continues() {
        let a = trial_with("A", TrialStatus::Completed, &[1.0, 0.9]);
        let b = trial_with("B", TrialStatus::Completed, &[0.5, 0.4]);
        let c = trial_with("C", TrialStatus::Running, &[0.8, 0.7]);
        let pool = [a, b, c.clone()];
        assert_eq!(median_decision(&c, 2, &pool, &defaults()), TrialDecision::Continue);
    }

    #[test]
    fn grace_period_and_later_steps() {
        let cfg = MedianStoppingConfig {
            grace_period: 3,
            min_comparison_trials: 2,
        };
        let a = trial_with("A", TrialStatus::Completed, &[0.1, 0.1, 0.1]);
        let b = trial_with("B", TrialStatus::Completed, &[0.1, 0.1, 0.1]);
        let c = trial_with("C", TrialStatus::Running, &[9.0, 9.0, 9.0]);
        let pool = [a, b, c.clone()];
        assert_eq!(median_decision(&c, 2, &pool, &cfg), TrialDecision::Continue);
        assert_eq!(median_decision(&c, 3, &pool, &cfg), TrialDecision::Stop);
    }

    #[test]
    fn only_results_up_to_step_count() {
        // Later drops in A and B are ignored when judging at step 1.
        let a = trial_with("A", TrialStatus::Completed, &[1.0, 0.0, 0.0]);
        let b = trial_with("B", TrialStatus::Completed, &[1.0, 0.0]);
        let c = trial_with("C", TrialStatus::Running, &[0.9]);
        let pool = [a, b, c.clone()];
        assert_eq!(median_decision(&c, 1, &pool, &defaults()), TrialDecision::Continue);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn lowering_others_never_rescues(
            others in prop::collection::vec(prop::collection::vec(0.0f64..2.0, 1..5), 2..6),
            own in prop::collection::vec(0.0f64..2.0, 1..5),
            which in 0usize..6,
            delta in 0.0f64..1.0,
        ) {
            let step = own.len() as u64;
            let me = trial_with("me", TrialStatus::Running, &own);
            let mut pool: Vec<Trial> = others
                .iter()
                .enumerate()
                .map(|(i, v)| trial_with(&format!("o{i}"), TrialStatus::Running, v))
                .collect();
            pool.push(me.clone());
            let before = median_decision(&me, step, &pool, &defaults());
            let idx = which % others.len();
            let lowered: Vec<f64> = others[idx].iter().map(|v| v - delta).collect();
            pool[idx] = trial_with(&format!("o{idx}"), TrialStatus::Running, &lowered);
            let after = median_decision(&me, step, &pool, &defaults());
            if before == TrialDecision::Stop {
                prop_assert_eq!(after, TrialDecision::Stop);
            }
        }
    }
}
