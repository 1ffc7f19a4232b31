//! Experiment orchestration for hyperparameter search.
//!
//! An experiment runs many trials of a trainable under a resource budget. A
//! [`TrialScheduler`] sees every intermediate result and decides whether each
//! trial continues, pauses, stops or restarts from another trial's checkpoint.
//! Workers speak a line-delimited JSON protocol on stdin/stdout; an in-process
//! simulated executor gives deterministic runs for testing.

pub mod engine;
pub mod executor;
pub mod num;
pub mod rng;
pub mod scheduler;
pub mod space;
pub mod trial;

pub use engine::{ExperimentConfig, ExperimentReport, EngineError};
pub use rng::DeterministicRng;
pub use scheduler::{SchedulerConfig, TrialPoolView, TrialScheduler};
pub use space::{ParamDomain, ParamSpace};
pub use trial::{
    CheckpointRef, Config, Metrics, Mode, Objective, ParamValue, ResourceRequest, ResultRecord,
    Trial, TrialDecision, TrialId, TrialStatus,
};

/// Exponential learning curve in double precision.
pub type ExpCurveTrainable = executor::sim::ExpCurve<f64>;
/// Two-parameter quadratic toy problem in double precision.
pub type QuadraticTrainable = executor::sim::QuadraticToy<f64>;
