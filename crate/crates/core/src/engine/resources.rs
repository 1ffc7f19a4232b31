use std::collections::BTreeMap;

use thiserror::Error;

use crate::trial::{ResourceRequest, TrialId};

/// Accounting is exact in units of 1/10000 of a CPU or GPU, so fractional
/// requests never accumulate rounding drift.
const SCALE: f64 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
struct Units {
    cpus: u64,
    gpus: u64,
}

impl Units {
    fn of(req: &ResourceRequest) -> Self {
        Self {
            cpus: (req.cpus * SCALE).round() as u64,
            gpus: (req.gpus * SCALE).round() as u64,
        }
    }

    fn to_request(self) -> ResourceRequest {
        ResourceRequest::new(self.cpus as f64 / SCALE, self.gpus as f64 / SCALE)
    }

    fn fits(self, free: Units) -> bool {
        self.cpus <= free.cpus && self.gpus <= free.gpus
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ResourceError {
    #[error("release for trial {0}, which holds no allocation")]
    ReleaseWithoutAllocate(TrialId),
    #[error("trial {0} already holds an allocation")]
    DoubleAllocate(TrialId),
    #[error("invalid resource request for trial {0}")]
    InvalidRequest(TrialId),
}

/// CPU/GPU capacity with a per-trial allocation ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct ResourcePool {
    total: Units,
    allocated: Units,
    ledger: BTreeMap<TrialId, Units>,
}

impl ResourcePool {
    pub fn new(total: ResourceRequest) -> Self {
        Self {
            total: Units::of(&total),
            allocated: Units::default(),
            ledger: BTreeMap::new(),
        }
    }

    pub fn total(&self) -> ResourceRequest {
        self.total.to_request()
    }

    pub fn allocated(&self) -> ResourceRequest {
        self.allocated.to_request()
    }

    pub fn free(&self) -> ResourceRequest {
        Units {
            cpus: self.total.cpus - self.allocated.cpus,
            gpus: self.total.gpus - self.allocated.gpus,
        }
        .to_request()
    }

    /// Allocates `req` to `trial` if it fits; otherwise leaves the pool unchanged.
    pub fn try_allocate(&mut self, trial: &TrialId, req: &ResourceRequest) -> Result<bool, ResourceError> {
        if !req.is_valid() {
            return Err(ResourceError::InvalidRequest(trial.clone()));
        }
        if self.ledger.contains_key(trial) {
            return Err(ResourceError::DoubleAllocate(trial.clone()));
        }
        let want = Units::of(req);
        let free = Units {
            cpus: self.total.cpus - self.allocated.cpus,
            gpus: self.total.gpus - self.allocated.gpus,
        };
        if !want.fits(free) {
            return Ok(false);
        }
        self.allocated.cpus += want.cpus;
        self.allocated.gpus += want.gpus;
        self.ledger.insert(trial.clone(), want);
        Ok(true)
    }

    /// Returns exactly what `trial` was allocated.
    pub fn release(&mut self, trial: &TrialId) -> Result<(), ResourceError> {
        let held = self
            .ledger
            .remove(trial)
            .ok_or_else(|| ResourceError::ReleaseWithoutAllocate(trial.clone()))?;
        self.allocated.cpus -= held.cpus;
        self.allocated.gpus -= held.gpus;
        Ok(())
    }

    pub fn holds(&self, trial: &TrialId) -> bool {
        self.ledger.contains_key(trial)
    }

    pub fn holders(&self) -> impl Iterator<Item = &TrialId> {
        self.ledger.keys()
    }

    /// `0 <= allocated <= total` and the ledger sums to `allocated`.
    pub fn check(&self) -> Result<(), String> {
        let sum = self.ledger.values().fold(Units::default(), |acc, u| Units {
            cpus: acc.cpus + u.cpus,
            gpus: acc.gpus + u.gpus,
        });
        if sum != self.allocated {
            return Err(format!("ledger sums to {sum:?}, pool says {:?}", self.allocated));
        }
        if !self.allocated.fits(self.total) {
            return Err(format!("allocated {:?} exceeds total {:?}", self.allocated, self.total));
        }
        Ok(())
    }
}
