use serde_json::{json, Value};

use super::{SchedulerError, TrialPoolView, TrialScheduler};
use crate::trial::{ResultRecord, Trial, TrialDecision, TrialId};

/// Runs trials in submission order and never intervenes.
#[derive(Debug, Default, Clone)]
pub struct FifoScheduler;

impl FifoScheduler {
    pub fn new() -> Self {
        Self
    }
}

impl TrialScheduler for FifoScheduler {
    fn name(&self) -> &'static str {
        "fifo"
    }

    fn on_result(
        &mut self,
        _trial: &Trial,
        _result: &ResultRecord,
        _pool: &mut TrialPoolView<'_>,
    ) -> Result<TrialDecision, SchedulerError> {
        Ok(TrialDecision::Continue)
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
