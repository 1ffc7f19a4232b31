//! Asynchronous successive halving in its stopping form: each trial is judged
//! when it crosses a milestone, against whatever has been recorded there so far.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{SchedulerError, TrialPoolView, TrialScheduler};
use crate::num::kth_smallest;
use crate::trial::{ResultRecord, Trial, TrialDecision, TrialId};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AshaConfig {
    #[serde(default = "default_min_resource")]
    pub min_resource: u64,
    pub max_resource: u64,
    #[serde(default = "default_eta")]
    pub reduction_factor: u64,
}

fn default_min_resource() -> u64 {
    1
}

pub(crate) fn default_eta() -> u64 {
    3
}

impl AshaConfig {
    pub fn new(min_resource: u64, max_resource: u64, reduction_factor: u64) -> Self {
        Self {
            min_resource,
            max_resource,
            reduction_factor,
        }
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.min_resource < 1 || self.max_resource < self.min_resource {
            return Err(SchedulerError::InvalidConfig(
                "asha: need max_resource >= min_resource >= 1".into(),
            ));
        }
        if self.reduction_factor < 2 {
            return Err(SchedulerError::InvalidConfig(
                "asha: reduction_factor must be >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// `r * eta^k` for every `k` with `r * eta^k <= R`.
pub fn asha_milestones(cfg: &AshaConfig) -> Vec<u64> {
    let mut out = Vec::new();
    let mut m = cfg.min_resource;
    while m <= cfg.max_resource {
        out.push(m);
        match m.checked_mul(cfg.reduction_factor) {
            Some(next) => m = next,
            None => break,
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungRecord {
    pub milestone: u64,
    pub recorded: BTreeMap<TrialId, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
struct AshaState {
    rungs: Vec<RungRecord>,
    /// Highest milestone each trial has been judged at.
    evaluated: BTreeMap<TrialId, u64>,
}

#[derive(Debug, Clone)]
pub struct AshaScheduler {
    cfg: AshaConfig,
    state: AshaState,
}

impl AshaScheduler {
    pub fn new(cfg: AshaConfig) -> Self {
        let rungs = asha_milestones(&cfg)
            .into_iter()
            .map(|milestone| RungRecord {
                milestone,
                recorded: BTreeMap::new(),
            })
            .collect();
        Self {
            cfg,
            state: AshaState {
                rungs,
                evaluated: BTreeMap::new(),
            },
        }
    }

    pub fn rungs(&self) -> &[RungRecord] {
        &self.state.rungs
    }

    /// Core rule, separated from the pool so it can be driven by plain values.
    pub fn observe(&mut self, trial: &TrialId, step: u64, value: f64) -> TrialDecision {
        let done = self.state.evaluated.get(trial).copied();
        let Some(rung) = self
            .state
            .rungs
            .iter_mut()
            .rev()
            .find(|r| r.milestone <= step && done.is_none_or(|d| r.milestone > d))
        else {
            return TrialDecision::Continue;
        };
        self.state.evaluated.insert(trial.clone(), rung.milestone);
        rung.recorded.insert(trial.clone(), value);

        let eta = self.cfg.reduction_factor as usize;
        let n = rung.recorded.len();
        if n < eta {
            return TrialDecision::Continue;
        }
        let values: Vec<f64> = rung.recorded.values().copied().collect();
        let k = (n / eta).max(1);
        let cutoff = kth_smallest(&values, k).expect("k within 1..=n");
        if value <= cutoff {
            TrialDecision::Continue
        } else {
            TrialDecision::Stop
        }
    }
}

impl TrialScheduler for AshaScheduler {
    fn name(&self) -> &'static str {
        "asha"
    }

    fn on_result(
        &mut self,
        trial: &Trial,
        result: &ResultRecord,
        _pool: &mut TrialPoolView<'_>,
    ) -> Result<TrialDecision, SchedulerError> {
        Ok(self.observe(&trial.id, result.step, trial.ranking_objective()))
    }

    fn choose_trial_to_run(&mut self, pool: &TrialPoolView<'_>) -> Option<TrialId> {
        pool.first_fit(|_| true).map(|t| t.id.clone())
    }

    fn max_resource(&self) -> Option<u64> {
        Some(self.cfg.max_resource)
    }

    fn export_state(&self) -> Value {
        serde_json::to_value(&self.state).expect("state serializes")
    }

    fn import_state(&mut self, state: Value) -> Result<(), SchedulerError> {
        let state: AshaState =
            serde_json::from_value(state).map_err(|e| SchedulerError::State(e.to_string()))?;
        let expected = asha_milestones(&self.cfg);
        if state.rungs.iter().map(|r| r.milestone).ne(expected) {
            return Err(SchedulerError::State("asha milestones do not match config".into()));
        }
        self.state = state;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DeterministicRng;

    fn id(s: &str) -> TrialId {
        TrialId::new(s)
    }

    #[test]
    fn milestone_examples() {
        assert_eq!(asha_milestones(&AshaConfig::new(1, 9, 3)), vec![1, 3, 9]);
        assert_eq!(asha_milestones(&AshaConfig::new(1, 1, 3)), vec![1]);
        assert_eq!(asha_milestones(&AshaConfig::new(2, 18, 3)), vec![2, 6, 18]);
        assert_eq!(asha_milestones(&AshaConfig::new(1, 10, 3)), vec![1, 3, 9]);
    }

    #[test]
    fn four_arrival_transcript() {
        let mut s = AshaScheduler::new(AshaConfig::new(1, 9, 3));
        let decisions: Vec<_> = [("a", 0.9), ("b", 0.5), ("c", 0.3), ("d", 0.7)]
            .iter()
            .map(|(t, v)| s.observe(&id(t), 1, *v))
            .collect();
        assert_eq!(
            decisions,
            [
                TrialDecision::Continue,
                TrialDecision::Continue,
                TrialDecision::Continue,
                TrialDecision::Stop
            ]
        );
    }

    #[test]
    fn no_new_milestone_continues() {
        let mut s = AshaScheduler::new(AshaConfig::new(1, 9, 3));
        s.observe(&id("a"), 1, 5.0);
        assert_eq!(s.observe(&id("a"), 2, 100.0), TrialDecision::Continue);
        assert_eq!(s.rungs()[1].recorded.len(), 0);
    }

    #[test]
    fn skipped_milestones_evaluate_only_the_largest() {
        let mut s = AshaScheduler::new(AshaConfig::new(1, 9, 3));
        s.observe(&id("a"), 4, 1.0);
        assert!(s.rungs()[0].recorded.is_empty());
        assert_eq!(s.rungs()[1].recorded.len(), 1);
        // rung 0 is now behind it; a later report at step 5 adds nothing.
        s.observe(&id("a"), 5, 1.0);
        assert_eq!(s.rungs()[1].recorded.len(), 1);
    }

    #[test]
    fn state_round_trip_replays_identically() {
        let mut a = AshaScheduler::new(AshaConfig::new(1, 9, 3));
        let mut rng = DeterministicRng::seeded(1);
        for i in 0..10 {
            a.observe(&id(&format!("t{i}")), 1, rng.unit());
        }
        let mut b = AshaScheduler::new(AshaConfig::new(1, 9, 3));
        b.import_state(a.export_state()).unwrap();
        for i in 0..10 {
            let v = rng.unit();
            assert_eq!(
                a.observe(&id(&format!("t{i}")), 3, v),
                b.observe(&id(&format!("t{i}")), 3, v)
            );
        }
    }

    #[test]
    fn best_at_rung_is_never_stopped() {
        for seed in 0..1000u64 {
            let mut rng = DeterministicRng::seeded(seed);
            let mut s = AshaScheduler::new(AshaConfig::new(1, 9, 3));
            let mut best = f64::INFINITY;
            for i in 0..27 {
                let v = rng.unit();
                let d = s.observe(&id(&format!("t{i}")), 1, v);
                if v <= best {
                    assert_eq!(d, TrialDecision::Continue, "seed {seed}");
                    best = v;
                }
            }
        }
    }

    /// Serial arrival of trials whose value at every milestone is `quality`.
    /// Returns how many trials are alive before milestone 1 and after each rung.
    fn survivors(order: &[usize]) -> Vec<usize> {
        let mut s = AshaScheduler::new(AshaConfig::new(1, 27, 3));
        let mut alive = order.to_vec();
        let mut counts = vec![alive.len()];
        for m in asha_milestones(&AshaConfig::new(1, 27, 3)).into_iter().take(3) {
            alive.retain(|&q| s.observe(&id(&format!("t{q}")), m, q as f64) == TrialDecision::Continue);
            counts.push(alive.len());
        }
        counts
    }

    fn within_rounding_bound(counts: &[usize], eta: usize) -> bool {
        let n = counts[0];
        (0..counts.len() - 1).all(|k| {
            let lo = n / eta.pow(k as u32 + 1);
            let hi = n.div_ceil(eta.pow(k as u32));
            (lo..=hi).contains(&counts[k + 1])
        })
    }

    #[test]
    fn survivor_counts_depend_on_arrival_order() {
        // Stopping-based ASHA judges each arrival against the rung so far, so
        // the count reaching the next milestone is not bounded by N / eta^k.
        let ascending: Vec<usize> = (0..27).collect();
        let descending: Vec<usize> = (0..27).rev().collect();
        assert_eq!(survivors(&ascending), [27, 2, 2, 2]);
        assert_eq!(survivors(&descending), [27, 27, 27, 27]);
        assert!(!within_rounding_bound(&survivors(&ascending), 3));
        assert!(!within_rounding_bound(&survivors(&descending), 3));
    }

    #[test]
    #[ignore = "does not hold for stopping-based ASHA; see survivor_counts_depend_on_arrival_order"]
    fn survivor_count_within_rounding_bound() {
        for seed in 0..1000u64 {
            let mut rng = DeterministicRng::seeded(seed);
            let mut order: Vec<usize> = (0..27).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.index(i + 1));
            }
            let counts = survivors(&order);
            assert!(within_rounding_bound(&counts, 3), "seed {seed}: {counts:?}");
        }
    }
}
