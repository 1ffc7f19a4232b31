//! Synchronous HyperBand.
//!
//! Trials are assigned to brackets as they join, filling the most aggressive
//! bracket first. Inside a bracket every member pauses at a rung until all live
//! members have reached it; then the best `max(1, floor(m / eta))` are promoted
//! and the rest stopped.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{rank_key, RungRecord, SchedulerError, TrialPoolView, TrialScheduler};
use crate::trial::{ResultRecord, Trial, TrialDecision, TrialId, TrialStatus};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperBandConfig {
    pub max_resource: u64,
    #[serde(default = "super::asha::default_eta")]
    pub reduction_factor: u64,
}

impl HyperBandConfig {
    pub fn new(max_resource: u64, reduction_factor: u64) -> Self {
        Self {
            max_resource,
            reduction_factor,
        }
    }

    pub fn validate(&self) -> Result<(), SchedulerError> {
        if self.max_resource < 1 {
            return Err(SchedulerError::InvalidConfig(
                "hyperband: max_resource must be >= 1".into(),
            ));
        }
        if self.reduction_factor < 2 {
            return Err(SchedulerError::InvalidConfig(
                "hyperband: reduction_factor must be >= 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rung {
    /// Planned number of trials at this rung.
    pub n: u64,
    /// Cumulative steps a trial must reach at this rung.
    pub resource: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bracket {
    pub index: u32,
    pub n: u64,
    pub r: f64,
    pub rungs: Vec<Rung>,
    pub members: Vec<TrialId>,
    /// Highest rung any member has been promoted to.
    pub current_rung: usize,
    pub records: Vec<RungRecord>,
}

impl Bracket {
    fn is_full(&self) -> bool {
        self.members.len() as u64 >= self.n
    }

    fn last_rung(&self) -> usize {
        self.rungs.len() - 1
    }
}

/// Largest `s` with `eta^s <= r`.
fn floor_log(r: u64, eta: u64) -> u32 {
    let mut s = 0;
    let mut p = 1u64;
    while let Some(next) = p.checked_mul(eta) {
        if next > r {
            break;
        }
        p = next;
        s += 1;
    }
    s
}

/// Bracket geometry, most aggressive bracket (`s = s_max`) first.
pub fn hyperband_brackets(cfg: &HyperBandConfig) -> Vec<Bracket> {
    let big_r = cfg.max_resource;
    let eta = cfg.reduction_factor;
    let s_max = floor_log(big_r, eta);
    (0..=s_max)
        .rev()
        .map(|s| {
            // n = ceil((B / R) * eta^s / (s + 1)) with B = (s_max + 1) R
            let num = u64::from(s_max + 1) * eta.pow(s);
            let den = u64::from(s + 1);
            let n = num.div_ceil(den);
            let r = big_r as f64 / (eta as f64).powi(s as i32);
            let rungs: Vec<Rung> = (0..=s)
                .map(|i| Rung {
                    n: n / eta.pow(i),
                    resource: ((r * (eta as f64).powi(i as i32)).round() as u64).max(1),
                })
                .collect();
            let records = rungs
                .iter()
                .map(|rung| RungRecord {
                    milestone: rung.resource,
                    recorded: BTreeMap::new(),
                })
                .collect();
            Bracket {
                index: s,
                n,
                r,
                rungs,
                members: Vec::new(),
                current_rung: 0,
                records,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Member {
    bracket: usize,
    rung: usize,
    /// Recorded at `rung` and held until the rung completes.
    waiting: bool,
    /// Promoted while paused; may be resumed.
    eligible: bool,
    done: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
struct HyperBandState {
    brackets: Vec<Bracket>,
    members: BTreeMap<TrialId, Member>,
}

#[derive(Debug, Clone)]
pub struct HyperBandScheduler {
    cfg: HyperBandConfig,
    state: HyperBandState,
}

enum Verdict {
    Promote,
    Cull,
}

impl HyperBandScheduler {
    pub fn new(cfg: HyperBandConfig) -> Self {
        Self {
            cfg,
            state: HyperBandState::default(),
        }
    }

    pub fn brackets(&self) -> &[Bracket] {
        &self.state.brackets
    }

    fn assign(&mut self, id: &TrialId) -> usize {
        if let Some(m) = self.state.members.get(id) {
            return m.bracket;
        }
        let idx = match self.state.brackets.iter().position(|b| !b.is_full()) {
            Some(i) => i,
            None => {
                // Every bracket is full: open another band with the same geometry.
                let start = self.state.brackets.len();
                self.state.brackets.extend(hyperband_brackets(&self.cfg));
                start
            }
        };
        self.state.brackets[idx].members.push(id.clone());
        self.state.members.insert(
            id.clone(),
            Member {
                bracket: idx,
                rung: 0,
                waiting: false,
                eligible: false,
                done: false,
            },
        );
        idx
    }

    /// If every live member of `rung` in bracket `b` has recorded, decide all of them.
    fn settle_rung(&mut self, b: usize, rung: usize) -> Option<BTreeMap<TrialId, Verdict>> {
        let eta = self.cfg.reduction_factor as usize;
        let bracket = &self.state.brackets[b];
        if rung >= bracket.last_rung() {
            return None;
        }
        let live: Vec<&TrialId> = bracket
            .members
            .iter()
            .filter(|id| {
                let m = &self.state.members[*id];
                !m.done && m.rung == rung
            })
            .collect();
        if live.is_empty() || !live.iter().all(|id| self.state.members[*id].waiting) {
            return None;
        }
        let record = &bracket.records[rung].recorded;
        let mut ranked: Vec<(&TrialId, f64)> = live.iter().map(|id| (*id, record[*id])).collect();
        ranked.sort_by(|a, b| rank_key(a.1, a.0).cmp(&rank_key(b.1, b.0)));
        let keep = (record.len() / eta).max(1).min(ranked.len());
        let verdicts: BTreeMap<TrialId, Verdict> = ranked
            .iter()
            .enumerate()
            .map(|(i, (id, _))| {
                let v = if i < keep { Verdict::Promote } else { Verdict::Cull };
                ((*id).clone(), v)
            })
            .collect();

        let bracket = &mut self.state.brackets[b];
        bracket.current_rung = bracket.current_rung.max(rung + 1);
        for (id, v) in &verdicts {
            let m = self.state.members.get_mut(id).expect("member");
            m.waiting = false;
            match v {
                Verdict::Promote => {
                    m.rung = rung + 1;
                    m.eligible = true;
                }
                Verdict::Cull => m.done = true,
            }
        }
        Some(verdicts)
    }

    /// Applies verdicts for members other than the reporting trial.
    fn dispatch(
        verdicts: &BTreeMap<TrialId, Verdict>,
        skip: Option<&TrialId>,
        pool: &mut TrialPoolView<'_>,
    ) {
        for (id, v) in verdicts {
            if Some(id) == skip {
                continue;
            }
            if let Verdict::Cull = v {
                pool.request_stop(id.clone());
            }
        }
    }

    fn retire(&mut self, trial: &Trial, value: f64, pool: &mut TrialPoolView<'_>) {
        let Some(m) = self.state.members.get_mut(&trial.id) else {
            return;
        };
        if m.done {
            return;
        }
        m.done = true;
        m.waiting = false;
        m.eligible = false;
        let (b, rung) = (m.bracket, m.rung);
        let bracket = &mut self.state.brackets[b];
        let reached = trial.last_step().unwrap_or(0) >= bracket.rungs[rung].resource;
        if reached || trial.status == TrialStatus::Errored {
            bracket.records[rung]
                .recorded
                .entry(trial.id.clone())
                .or_insert(value);
        }
        if let Some(verdicts) = self.settle_rung(b, rung) {
            Self::dispatch(&verdicts, None, pool);
        }
    }
}

impl TrialScheduler for HyperBandScheduler {
    fn name(&self) -> &'static str {
        "hyperband"
    }

    fn on_trial_add(&mut self, trial: &Trial, pool: &mut TrialPoolView<'_>) {
        let b = self.assign(&trial.id);
        let bracket = &self.state.brackets[b];
        pool.annotate(trial.id.clone(), format!("bracket {b} (s={})", bracket.index));
    }

    fn on_result(
        &mut self,
        trial: &Trial,
        result: &ResultRecord,
        pool: &mut TrialPoolView<'_>,
    ) -> Result<TrialDecision, SchedulerError> {
        let m = self
            .state
            .members
            .get_mut(&trial.id)
            .ok_or_else(|| SchedulerError::TrialWithoutBracket(trial.id.clone()))?;
        m.eligible = false;
        if m.waiting {
            return Ok(TrialDecision::Pause);
        }
        let (b, rung) = (m.bracket, m.rung);
        let bracket = &mut self.state.brackets[b];
        if result.step < bracket.rungs[rung].resource || rung == bracket.last_rung() {
            return Ok(TrialDecision::Continue);
        }
        bracket.records[rung]
            .recorded
            .insert(trial.id.clone(), trial.ranking_objective());
        self.state.members.get_mut(&trial.id).expect("member").waiting = true;

        let Some(verdicts) = self.settle_rung(b, rung) else {
            return Ok(TrialDecision::Pause);
        };
        Self::dispatch(&verdicts, Some(&trial.id), pool);
        let m = self.state.members.get_mut(&trial.id).expect("member");
        Ok(match verdicts.get(&trial.id) {
            Some(Verdict::Promote) => {
                m.eligible = false;
                TrialDecision::Continue
            }
            _ => TrialDecision::Stop,
        })
    }

    fn on_trial_complete(&mut self, trial: &Trial, pool: &mut TrialPoolView<'_>) {
        self.retire(trial, trial.ranking_objective(), pool);
    }

    fn on_trial_error(&mut self, trial: &Trial, pool: &mut TrialPoolView<'_>) {
        self.retire(trial, f64::INFINITY, pool);
    }

    fn choose_trial_to_run(&mut self, pool: &TrialPoolView<'_>) -> Option<TrialId> {
        let members = &self.state.members;
        let runnable = |id: &TrialId, want_eligible: bool| {
            let m = &members[id];
            if m.done || m.waiting || m.eligible != want_eligible {
                return false;
            }
            pool.get(id).is_some_and(|t| {
                matches!(t.status, TrialStatus::Pending | TrialStatus::Paused) && pool.fits(t)
            })
        };

        // Promoted trials first, from the bracket that has progressed furthest.
        let mut order: Vec<usize> = (0..self.state.brackets.len()).collect();
        order.sort_by_key(|&b| (std::cmp::Reverse(self.state.brackets[b].current_rung), b));
        for &b in &order {
            if let Some(id) = self.state.brackets[b]
                .members
                .iter()
                .find(|id| runnable(id, true))
            {
                return Some(id.clone());
            }
        }
        for bracket in &self.state.brackets {
            if let Some(id) = bracket.members.iter().find(|id| runnable(id, false)) {
                return Some(id.clone());
            }
        }
        pool.first_fit(|t| !members.contains_key(&t.id))
            .map(|t| t.id.clone())
    }

    fn max_resource(&self) -> Option<u64> {
        Some(self.cfg.max_resource)
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::testing::{push_result, trial_with};
    use crate::trial::ResourceRequest;

    /// Independent evaluation of the bracket formulas in floating point.
    fn oracle(big_r: u64, eta: u64) -> Vec<(u64, u64)> {
        let (rf, ef) = (big_r as f64, eta as f64);
        let s_max = (rf.ln() / ef.ln() + 1e-9).floor() as i32;
        let b = (s_max as f64 + 1.0) * rf;
        (0..=s_max)
            .rev()
            .map(|s| {
                let n = ((b / rf) * ef.powi(s) / (s as f64 + 1.0)).ceil() as u64;
                let r = (rf * ef.powi(-s)).round() as u64;
                (n, r)
            })
            .collect()
    }

    fn geometry(big_r: u64, eta: u64) -> Vec<(u64, u64)> {
        hyperband_brackets(&HyperBandConfig::new(big_r, eta))
            .iter()
            .map(|b| (b.n, b.rungs[0].resource))
            .collect()
    }

    #[test]
    fn bracket_examples() {
        assert_eq!(geometry(81, 3), vec![(81, 1), (34, 3), (15, 9), (8, 27), (5, 81)]);
        assert_eq!(geometry(27, 3), vec![(27, 1), (12, 3), (6, 9), (4, 27)]);
        assert_eq!(geometry(1, 3), vec![(1, 1)]);
    }

    #[test]
    fn brackets_match_formula_oracle() {
        for eta in 2..=5u64 {
            for big_r in 1..=300u64 {
                assert_eq!(geometry(big_r, eta), oracle(big_r, eta), "R={big_r} eta={eta}");
            }
        }
    }

    #[test]
    fn rung_geometry_and_budget() {
        for (big_r, eta) in [(81u64, 3u64), (27, 3), (64, 2), (100, 4), (10, 3)] {
            let s_max = floor_log(big_r, eta) as u64;
            let budget = (s_max + 1) * big_r;
            for b in hyperband_brackets(&HyperBandConfig::new(big_r, eta)) {
                let last = b.rungs.last().unwrap();
                assert!(last.resource.abs_diff(big_r) <= 1, "last rung {last:?} vs R={big_r}");
                for (i, rung) in b.rungs.iter().enumerate() {
                    assert_eq!(rung.n, b.n / eta.pow(i as u32));
                }
                let mut prev = 0;
                let mut used = 0;
                for rung in &b.rungs {
                    used += rung.n * (rung.resource - prev);
                    prev = rung.resource;
                }
                let slack = (b.index as u64 + 1) * eta;
                assert!(used <= budget + slack, "bracket s={} uses {used}", b.index);
            }
        }
    }

    fn scheduler_with(ids: &[&str], r: u64) -> (HyperBandScheduler, Vec<Trial>) {
        let mut s = HyperBandScheduler::new(HyperBandConfig::new(r, 3));
        let trials: Vec<Trial> = ids
            .iter()
            .map(|id| trial_with(id, TrialStatus::Pending, &[]))
            .collect();
        for t in &trials {
            let mut pool = TrialPoolView::new(&trials, ResourceRequest::ZERO);
            s.on_trial_add(t, &mut pool);
        }
        (s, trials)
    }

    fn report(
        s: &mut HyperBandScheduler,
        trials: &mut [Trial],
        idx: usize,
        step: u64,
        v: f64,
    ) -> (TrialDecision, Vec<TrialId>) {
        trials[idx].status = TrialStatus::Running;
        let r = push_result(&mut trials[idx], step, v);
        let snapshot = trials.to_vec();
        let me = snapshot[idx].clone();
        let mut pool = TrialPoolView::new(&snapshot, ResourceRequest::new(8.0, 0.0));
        let d = s.on_result(&me, &r, &mut pool).unwrap();
        let stops = pool.into_actions().stop;
        trials[idx].status = match d {
            TrialDecision::Pause => TrialStatus::Paused,
            TrialDecision::Stop => TrialStatus::Stopped,
            _ => TrialStatus::Running,
        };
        (d, stops)
    }

    #[test]
    fn promotes_best_of_three() {
        // R=3 gives a first bracket with n=3 at r=1.
        let (mut s, mut trials) = scheduler_with(&["tA", "tB", "tC"], 3);
        assert_eq!(s.brackets()[0].n, 3);
        assert_eq!(report(&mut s, &mut trials, 0, 1, 0.5).0, TrialDecision::Pause);
        assert_eq!(report(&mut s, &mut trials, 1, 1, 0.9).0, TrialDecision::Pause);
        // Last arrival is the best: it keeps running, the two paused ones are stopped.
        let (d, stops) = report(&mut s, &mut trials, 2, 1, 0.3);
        assert_eq!(d, TrialDecision::Continue);
        assert_eq!(stops, vec![TrialId::new("tA"), TrialId::new("tB")]);
    }

    #[test]
    fn promoted_paused_trial_is_resumed() {
        let (mut s, mut trials) = scheduler_with(&["tA", "tB", "tC"], 3);
        report(&mut s, &mut trials, 0, 1, 0.3);
        report(&mut s, &mut trials, 1, 1, 0.5);
        // Rung still waiting on tC: nothing to resume.
        let pool = TrialPoolView::new(&trials, ResourceRequest::new(8.0, 0.0));
        assert_eq!(s.choose_trial_to_run(&pool), Some(TrialId::new("tC")));
        let (d, stops) = report(&mut s, &mut trials, 2, 1, 0.9);
        assert_eq!(d, TrialDecision::Stop);
        assert_eq!(stops, vec![TrialId::new("tB")]);
        trials[1].status = TrialStatus::Stopped;
        let pool = TrialPoolView::new(&trials, ResourceRequest::new(8.0, 0.0));
        assert_eq!(s.choose_trial_to_run(&pool), Some(TrialId::new("tA")));
    }

    #[test]
    fn ties_go_to_smaller_id() {
        let (mut s, mut trials) = scheduler_with(&["tA", "tB", "tC"], 3);
        report(&mut s, &mut trials, 0, 1, 0.3);
        report(&mut s, &mut trials, 1, 1, 0.3);
        let (d, stops) = report(&mut s, &mut trials, 2, 1, 0.9);
        assert_eq!(d, TrialDecision::Stop);
        assert_eq!(stops, vec![TrialId::new("tB")]);
        assert!(s.state.members[&TrialId::new("tA")].eligible);
    }

    #[test]
    fn errored_member_unblocks_rung() {
        let (mut s, mut trials) = scheduler_with(&["tA", "tB", "tC"], 3);
        report(&mut s, &mut trials, 0, 1, 0.4);
        report(&mut s, &mut trials, 1, 1, 0.2);
        trials[2].status = TrialStatus::Errored;
        let snapshot = trials.clone();
        let mut pool = TrialPoolView::new(&snapshot, ResourceRequest::ZERO);
        s.on_trial_error(&snapshot[2], &mut pool);
        assert_eq!(pool.into_actions().stop, vec![TrialId::new("tA")]);
        assert!(s.state.members[&TrialId::new("tB")].eligible);
    }

    #[test]
    fn unknown_trial_is_an_error() {
        let mut s = HyperBandScheduler::new(HyperBandConfig::new(9, 3));
        let t = trial_with("x", TrialStatus::Running, &[1.0]);
        let trials = vec![t.clone()];
        let mut pool = TrialPoolView::new(&trials, ResourceRequest::ZERO);
        assert_eq!(
            s.on_result(&t, &t.results[0], &mut pool),
            Err(SchedulerError::TrialWithoutBracket(TrialId::new("x")))
        );
    }

    #[test]
    fn overflow_opens_a_new_band() {
        let ids: Vec<String> = (0..6).map(|i| format!("t{i}")).collect();
        let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        // R=1: one bracket with n=1, so each trial gets its own band.
        let (s, _) = scheduler_with(&refs, 1);
        assert_eq!(s.brackets().len(), 6);
    }
}
