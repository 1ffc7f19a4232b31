use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::SchedulerError;
use crate::rng::DeterministicRng;
use crate::space::{sample_config, ParamSpace};
use crate::trial::Config;

/// Generates new trial configurations during an experiment.
pub trait SuggestionSource: Send {
    /// Next configuration, or `None` once the budget is spent.
    fn suggest(&mut self) -> Option<Config>;

    fn remaining(&self) -> usize;

    fn export_state(&self) -> Value;

    fn import_state(&mut self, state: Value) -> Result<(), SchedulerError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RandomSearchState {
    issued: usize,
    rng: DeterministicRng,
}

/// Seeded random search with a fixed trial budget.
#[derive(Debug, Clone)]
pub struct RandomSearch {
    space: ParamSpace,
    max_trials: usize,
    state: RandomSearchState,
}

impl RandomSearch {
    pub fn new(space: ParamSpace, max_trials: usize, seed: u64) -> Self {
        Self {
            space,
            max_trials,
            state: RandomSearchState {
                issued: 0,
                rng: DeterministicRng::with_stream(seed, 0x5eed),
            },
        }
    }
}

impl SuggestionSource for RandomSearch {
    fn suggest(&mut self) -> Option<Config> {
        if self.state.issued >= self.max_trials {
            return None;
        }
        self.state.issued += 1;
        Some(sample_config(&self.space, &mut self.state.rng))
    }

    fn remaining(&self) -> usize {
        self.max_trials.saturating_sub(self.state.issued)
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
