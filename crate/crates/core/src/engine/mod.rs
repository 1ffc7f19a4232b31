//! The experiment event loop.
//!
//! One logical loop owns every trial, the scheduler and the resource pool.
//! Each iteration first starts whatever the scheduler picks while capacity is
//! free, then handles exactly one worker event. Snapshots are written between
//! events every `snapshot_interval` events, so a killed experiment can resume
//! from `experiment_state.json` plus the checkpoint files.

pub mod config;
pub mod report;
pub mod resources;
pub mod snapshot;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use thiserror::Error;

pub use config::{
    CheckpointConfig, ConfigError, ExperimentConfig, ResourceConfig, StoppingCriteria,
    SuggestionConfig,
};
pub use report::{ExperimentReport, LineageLine, ResultLine, TrialSummary};
pub use resources::{ResourceError, ResourcePool};
pub use snapshot::{ExperimentSnapshot, SchedulerSnapshot};

use crate::executor::checkpoint::{CheckpointError, CheckpointStore};
use crate::executor::protocol::{Command, WorkerEvent};
use crate::executor::{build_executor, EventKind, Executor, ExecutorEvent, LaunchSpec, Poll};
use crate::scheduler::{
    rank_key, PoolActions, RandomSearch, SchedulerError, SuggestionSource, TrialPoolView,
    TrialScheduler,
};
use crate::space::expand_grid;
use crate::trial::{
    CheckpointRef, Config, LifecycleEvent, Metrics, ResultRecord, Trial, TrialDecision, TrialId,
    TrialOrigin, TrialStatus,
};
use report::{LINEAGE_FILE, REPORT_FILE, RESULTS_FILE};

pub const SAVE_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("scheduler contract violation: {0}")]
    SchedulerContractViolation(String),
    #[error("worker failure: {0}")]
    WorkerFailure(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("snapshot version {found} is not supported (expected {expected})")]
    SnapshotVersionMismatch { found: String, expected: u32 },
    #[error("checkpoint file {0} is missing")]
    MissingCheckpointFile(PathBuf),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Resources(#[from] ResourceError),
    #[error("engine invariant violated after event {event}: {message}")]
    InvariantViolation { event: u64, message: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl From<ConfigError> for EngineError {
    fn from(e: ConfigError) -> Self {
        EngineError::ConfigInvalid(e.to_string())
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> EngineError {
    let context = context.into();
    move |source| EngineError::Io { context, source }
}

#[derive(Debug, Clone)]
pub struct EngineOptions {
    /// Upper bound on simultaneously running trials, on top of resource capacity.
    pub max_concurrent: Option<usize>,
    /// Cross-check resource accounting against trial statuses after every event.
    pub check_invariants: bool,
    /// Stop abruptly after this many events, without a final snapshot. Used to
    /// simulate a crash.
    pub halt_after_events: Option<u64>,
    /// Print the trial table to stdout every `snapshot_interval` events and at the end.
    pub progress: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            max_concurrent: None,
            check_invariants: true,
            halt_after_events: None,
            progress: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Finished(ExperimentReport),
    Halted { events: u64 },
}

/// What the engine saw when it enforced a RESTART.
#[derive(Debug, Clone, PartialEq)]
pub struct RestartTrace {
    pub event: u64,
    pub trial: TrialId,
    pub step: u64,
    pub source: TrialId,
    pub checkpoint_step: Option<u64>,
    /// Non-terminal trials with results, best first, at decision time.
    pub ranking: Vec<TrialId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AfterSave {
    Continue,
    Pause,
}

#[derive(Debug, Clone, PartialEq)]
enum SlotState {
    Stepping,
    Saving {
        then: AfterSave,
        step: u64,
        worker_step: u64,
        deadline: Instant,
    },
}

/// A live worker. A slot exists exactly while its trial is RUNNING.
#[derive(Debug, Clone)]
struct Slot {
    launch: u64,
    state: SlotState,
}

pub struct EngineBuilder {
    config: ExperimentConfig,
    options: EngineOptions,
    scheduler: Option<Box<dyn TrialScheduler>>,
    executor: Option<Box<dyn Executor>>,
    initial_configs: Option<Vec<Config>>,
}

impl EngineBuilder {
    pub fn options(mut self, options: EngineOptions) -> Self {
        self.options = options;
        self
    }

    /// Uses this scheduler instead of the one named in the config.
    pub fn scheduler(mut self, scheduler: Box<dyn TrialScheduler>) -> Self {
        self.scheduler = Some(scheduler);
        self
    }

    pub fn executor(mut self, executor: Box<dyn Executor>) -> Self {
        self.executor = Some(executor);
        self
    }

    /// Starts with these trial configs instead of expanding the grid.
    pub fn initial_configs(mut self, configs: Vec<Config>) -> Self {
        self.initial_configs = Some(configs);
        self
    }

    pub fn build(self) -> Result<Engine, EngineError> {
        let config = self.config;
        config.validate()?;
        let out = config.output_dir.clone();
        fs::create_dir_all(&out).map_err(io_err(format!("creating {}", out.display())))?;
        let scheduler = match self.scheduler {
            Some(s) => s,
            None => config.scheduler.build(&config.space, config.seed)?,
        };
        let initial = match self.initial_configs {
            Some(c) => c,
            None => match config.suggestion {
                SuggestionConfig::None => {
                    expand_grid(&config.space).map_err(|e| EngineError::ConfigInvalid(e.to_string()))?
                }
                SuggestionConfig::Random { .. } => Vec::new(),
            },
        };
        let mut engine = Engine::assemble(config, self.options, scheduler, self.executor, out, false)?;
        for c in initial {
            if engine.add_trial(c, TrialOrigin::Initial)?.is_none() {
                break;
            }
        }
        engine.write_snapshot()?;
        Ok(engine)
    }
}

pub struct Engine {
    config: ExperimentConfig,
    options: EngineOptions,
    out: PathBuf,
    trials: Vec<Trial>,
    scheduler: Box<dyn TrialScheduler>,
    suggestion: Option<Box<dyn SuggestionSource>>,
    executor: Box<dyn Executor>,
    pool: ResourcePool,
    store: CheckpointStore,
    slots: BTreeMap<TrialId, Slot>,
    max_steps: u64,
    checkpoint_every: Vec<u64>,
    event_counter: u64,
    launch_counter: u64,
    results_lines: u64,
    lineage_lines: u64,
    results_log: File,
    lineage_log: File,
    /// Checkpoint files dropped by retention, deleted once a snapshot no longer needs them.
    doomed: Vec<PathBuf>,
    snapshot_due: bool,
    trace: Vec<RestartTrace>,
}

impl Engine {
    pub fn builder(config: ExperimentConfig) -> EngineBuilder {
        EngineBuilder {
            config,
            options: EngineOptions::default(),
            scheduler: None,
            executor: None,
            initial_configs: None,
        }
    }

    pub fn new(config: ExperimentConfig) -> Result<Self, EngineError> {
        Self::builder(config).build()
    }

    fn assemble(
        config: ExperimentConfig,
        options: EngineOptions,
        scheduler: Box<dyn TrialScheduler>,
        executor: Option<Box<dyn Executor>>,
        out: PathBuf,
        append: bool,
    ) -> Result<Self, EngineError> {
        let open = |name: &str| {
            let path = out.join(name);
            let mut o = OpenOptions::new();
            if append {
                o.append(true).create(true);
            } else {
                o.write(true).create(true).truncate(true);
            }
            o.open(&path).map_err(io_err(format!("opening {}", path.display())))
        };
        let results_log = open(RESULTS_FILE)?;
        let lineage_log = open(LINEAGE_FILE)?;
        let suggestion: Option<Box<dyn SuggestionSource>> = match &config.suggestion {
            SuggestionConfig::None => None,
            SuggestionConfig::Random { .. } => Some(Box::new(RandomSearch::new(
                config.space.clone(),
                config.trial_budget().unwrap_or(usize::MAX),
                config.seed,
            ))),
        };
        let executor =
            executor.unwrap_or_else(|| build_executor(&config.trainable, Some(out.join("logs"))));
        let max_steps = config.effective_max_steps(scheduler.max_resource());
        let checkpoint_every = [config.checkpoint.interval, scheduler.checkpoint_interval()]
            .into_iter()
            .flatten()
            .collect();
        Ok(Self {
            pool: ResourcePool::new(config.resources.total),
            store: CheckpointStore::new(out.join("checkpoints"), config.checkpoint.keep_last),
            options,
            out,
            trials: Vec::new(),
            scheduler,
            suggestion,
            executor,
            slots: BTreeMap::new(),
            max_steps,
            checkpoint_every,
            event_counter: 0,
            launch_counter: 0,
            results_lines: 0,
            lineage_lines: 0,
            results_log,
            lineage_log,
            doomed: Vec::new(),
            snapshot_due: false,
            trace: Vec::new(),
            config,
        })
    }

    /// Reopens the experiment in `dir`. Trials that were running are rolled
    /// back to their latest checkpoint (or to the start) and queued again.
    pub fn resume(dir: &Path, options: EngineOptions) -> Result<Self, EngineError> {
        let snap = ExperimentSnapshot::read(dir)?;
        let mut config = snap.config;
        config.validate()?;
        config.output_dir = dir.to_path_buf();
        let mut scheduler = config.scheduler.build(&config.space, config.seed)?;
        if scheduler.name() != snap.scheduler.name {
            return Err(EngineError::ConfigInvalid(format!(
                "snapshot holds state for scheduler `{}`, config builds `{}`",
                snap.scheduler.name,
                scheduler.name()
            )));
        }
        scheduler.import_state(snap.scheduler.state)?;

        let store = CheckpointStore::new(dir.join("checkpoints"), config.checkpoint.keep_last);
        let mut trials = snap.trials;
        let mut rolled_back: BTreeMap<TrialId, u64> = BTreeMap::new();
        for t in trials.iter_mut().filter(|t| t.status == TrialStatus::Running) {
            match t.latest_checkpoint().cloned() {
                Some(c) => match store.verify(&c) {
                    Ok(()) => {
                        t.truncate_after(c.step);
                        t.status = TrialStatus::Pending;
                    }
                    Err(e) => {
                        let err = match e {
                            CheckpointError::MissingFile(p) => EngineError::MissingCheckpointFile(p),
                            other => EngineError::WorkerFailure(other.to_string()),
                        };
                        log::warn!("trial {} cannot be resumed: {err}", t.id);
                        t.error = Some(err.to_string());
                        t.status = TrialStatus::Errored;
                    }
                },
                None => {
                    t.truncate_after(0);
                    t.step_offset = 0;
                    t.status = TrialStatus::Pending;
                }
            }
            rolled_back.insert(t.id.clone(), t.last_step().unwrap_or(0));
        }

        let results_lines = rewrite_log(&dir.join(RESULTS_FILE), snap.results_lines, |line| {
            match serde_json::from_str::<ResultLine>(line) {
                Ok(r) => rolled_back.get(&r.trial).is_none_or(|keep| r.step <= *keep),
                Err(_) => true,
            }
        })?;
        let lineage_lines = rewrite_log(&dir.join(LINEAGE_FILE), snap.lineage_lines, |_| true)?;

        let mut engine = Self::assemble(config, options, scheduler, None, dir.to_path_buf(), true)?;
        if let (Some(source), Some(state)) = (engine.suggestion.as_mut(), snap.suggestion) {
            source.import_state(state)?;
        }
        engine.trials = trials;
        engine.event_counter = snap.event_counter;
        engine.launch_counter = snap.launch_counter;
        engine.results_lines = results_lines;
        engine.lineage_lines = lineage_lines;
        engine.write_snapshot()?;
        log::info!(
            "resumed `{}` at event {} ({} trial(s) rolled back)",
            engine.config.name,
            engine.event_counter,
            rolled_back.len()
        );
        Ok(engine)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn output_dir(&self) -> &Path {
        &self.out
    }

    pub fn event_count(&self) -> u64 {
        self.event_counter
    }

    pub fn restarts(&self) -> &[RestartTrace] {
        &self.trace
    }

    pub fn pool(&self) -> &ResourcePool {
        &self.pool
    }

    pub fn report(&self) -> ExperimentReport {
        ExperimentReport::from_trials(&self.config.name, &self.config.objective, &self.trials)
    }

    /// Runs until no trial can make progress.
    pub fn run(&mut self) -> Result<RunOutcome, EngineError> {
        loop {
            self.fill_slots()?;
            self.check_invariants()?;
            if self.snapshot_due && !self.pause_in_flight() {
                self.write_snapshot()?;
            }
            if self.slots.is_empty() {
                break;
            }
            match self.executor.next_event(self.poll_timeout()) {
                Poll::Event(ev) => {
                    if !self.handle_event(ev)? {
                        continue;
                    }
                    self.event_counter += 1;
                    if self.event_counter.is_multiple_of(self.config.snapshot_interval) {
                        self.snapshot_due = true;
                        if self.options.progress {
                            print!("{}", report::format_progress_table(&self.trials));
                        }
                    }
                    if self.options.halt_after_events == Some(self.event_counter) {
                        log::warn!("halting after event {}", self.event_counter);
                        self.executor.reset();
                        return Ok(RunOutcome::Halted {
                            events: self.event_counter,
                        });
                    }
                }
                Poll::Timeout => self.expire_saves()?,
                Poll::Idle => {
                    let lost: Vec<TrialId> = self.slots.keys().cloned().collect();
                    for id in lost {
                        let idx = self.index_of(&id)?;
                        self.fail_trial(idx, "worker went away without reporting".into())?;
                    }
                }
            }
            self.check_invariants()?;
        }

        for idx in 0..self.trials.len() {
            if self.trials[idx].status == TrialStatus::Paused {
                log::info!("stopping {}: paused and never resumed", self.trials[idx].id);
                self.transition(idx, LifecycleEvent::Stop)?;
            }
        }
        self.write_snapshot()?;
        let report = self.report();
        let path = self.out.join(REPORT_FILE);
        fs::write(&path, report.to_json_string() + "\n")
            .map_err(io_err(format!("writing {}", path.display())))?;
        if self.options.progress {
            print!("{}", report::format_progress_table(&self.trials));
        }
        Ok(RunOutcome::Finished(report))
    }

    fn index_of(&self, id: &TrialId) -> Result<usize, EngineError> {
        self.trials
            .iter()
            .position(|t| &t.id == id)
            .ok_or_else(|| EngineError::SchedulerContractViolation(format!("unknown trial {id}")))
    }

    fn pause_in_flight(&self) -> bool {
        self.slots.values().any(|s| {
            matches!(
                s.state,
                SlotState::Saving {
                    then: AfterSave::Pause,
                    ..
                }
            )
        })
    }

    fn poll_timeout(&self) -> Option<Duration> {
        self.slots
            .values()
            .filter_map(|s| match s.state {
                SlotState::Saving { deadline, .. } => Some(deadline.saturating_duration_since(Instant::now())),
                SlotState::Stepping => None,
            })
            .min()
    }

    fn expire_saves(&mut self) -> Result<(), EngineError> {
        let now = Instant::now();
        let expired: Vec<TrialId> = self
            .slots
            .iter()
            .filter(|(_, s)| matches!(s.state, SlotState::Saving { deadline, .. } if deadline <= now))
            .map(|(id, _)| id.clone())
            .collect();
        for id in expired {
            let idx = self.index_of(&id)?;
            self.fail_trial(idx, CheckpointError::SaveTimeout(id).to_string())?;
        }
        Ok(())
    }

    fn write_snapshot(&mut self) -> Result<(), EngineError> {
        self.results_log.flush().map_err(io_err("flushing results log"))?;
        let mut snap = ExperimentSnapshot::new(
            self.config.clone(),
            self.trials.clone(),
            SchedulerSnapshot {
                name: self.scheduler.name().to_string(),
                state: self.scheduler.export_state(),
            },
        );
        snap.event_counter = self.event_counter;
        snap.launch_counter = self.launch_counter;
        snap.results_lines = self.results_lines;
        snap.lineage_lines = self.lineage_lines;
        snap.suggestion = self.suggestion.as_ref().map(|s| s.export_state());
        snap.write(&self.out)
            .map_err(io_err(format!("writing snapshot in {}", self.out.display())))?;
        self.snapshot_due = false;
        let doomed = std::mem::take(&mut self.doomed);
        self.store
            .discard(doomed)
            .map_err(|e| EngineError::WorkerFailure(e.to_string()))?;
        Ok(())
    }

    fn check_invariants(&self) -> Result<(), EngineError> {
        if !self.options.check_invariants {
            return Ok(());
        }
        let fail = |message: String| EngineError::InvariantViolation {
            event: self.event_counter,
            message,
        };
        self.pool.check().map_err(fail)?;
        for t in &self.trials {
            let running = t.status == TrialStatus::Running;
            if self.pool.holds(&t.id) != running {
                return Err(fail(format!(
                    "trial {} is {} but {} resources",
                    t.id,
                    t.status,
                    if running { "holds no" } else { "holds" }
                )));
            }
            if self.slots.contains_key(&t.id) != running {
                return Err(fail(format!("trial {} is {} with mismatched worker slot", t.id, t.status)));
            }
        }
        Ok(())
    }

    fn add_trial(&mut self, config: Config, origin: TrialOrigin) -> Result<Option<TrialId>, EngineError> {
        if self
            .config
            .stopping
            .max_total_trials
            .is_some_and(|cap| self.trials.len() >= cap)
        {
            return Ok(None);
        }
        let id = TrialId::new(format!("t{}", self.trials.len() + 1));
        self.trials.push(Trial::new(
            id.clone(),
            config,
            self.config.resources.per_trial,
            origin,
        ));
        let idx = self.trials.len() - 1;
        let mut view = TrialPoolView::new(&self.trials, self.pool.free());
        self.scheduler.on_trial_add(&self.trials[idx], &mut view);
        let actions = view.into_actions();
        self.apply_actions(actions)?;
        Ok(Some(id))
    }

    /// Draws a new config when nothing is waiting and a trial could start.
    fn maybe_suggest(&mut self) -> Result<(), EngineError> {
        let Some(source) = self.suggestion.as_mut() else {
            return Ok(());
        };
        if self.trials.iter().any(|t| t.status == TrialStatus::Pending)
            || !self.config.resources.per_trial.fits_within(&self.pool.free())
            || self.config.trial_budget().is_some_and(|b| self.trials.len() >= b)
        {
            return Ok(());
        }
        if let Some(config) = source.suggest() {
            self.add_trial(config, TrialOrigin::Suggested)?;
        }
        Ok(())
    }

    fn fill_slots(&mut self) -> Result<(), EngineError> {
        loop {
            if self.options.max_concurrent.is_some_and(|m| self.slots.len() >= m) {
                return Ok(());
            }
            self.maybe_suggest()?;
            let view = TrialPoolView::new(&self.trials, self.pool.free());
            let Some(id) = self.scheduler.choose_trial_to_run(&view) else {
                return Ok(());
            };
            let idx = self.index_of(&id)?;
            let trial = &self.trials[idx];
            if !matches!(trial.status, TrialStatus::Pending | TrialStatus::Paused) {
                return Err(EngineError::SchedulerContractViolation(format!(
                    "{} chose trial {id}, which is {}",
                    self.scheduler.name(),
                    trial.status
                )));
            }
            if !self.pool.try_allocate(&id, &trial.resources)? {
                return Err(EngineError::SchedulerContractViolation(format!(
                    "{} chose trial {id}, whose request does not fit the free resources",
                    self.scheduler.name()
                )));
            }
            self.start_trial(idx)?;
        }
    }

    fn transition(&mut self, idx: usize, event: LifecycleEvent) -> Result<(), EngineError> {
        let t = &mut self.trials[idx];
        t.apply_transition(event)
            .map(|_| ())
            .map_err(|e| EngineError::SchedulerContractViolation(format!("trial {}: {e}", t.id)))
    }

    /// Launches a worker for a trial that already holds its resources.
    fn start_trial(&mut self, idx: usize) -> Result<(), EngineError> {
        let event = match self.trials[idx].status {
            TrialStatus::Paused => LifecycleEvent::Resume,
            _ => LifecycleEvent::Start,
        };
        self.transition(idx, event)?;
        let id = self.trials[idx].id.clone();
        self.launch_counter += 1;
        self.slots.insert(
            id.clone(),
            Slot {
                launch: self.launch_counter,
                state: SlotState::Stepping,
            },
        );
        let restore_path = match self.trials[idx].latest_checkpoint().cloned() {
            Some(c) => {
                if let Err(e) = self.store.verify(&c) {
                    return self.fail_trial(idx, e.to_string());
                }
                let t = &mut self.trials[idx];
                t.truncate_after(c.step);
                t.step_offset = c.step as i64 - c.worker_step as i64;
                Some(c.path)
            }
            None => {
                self.trials[idx].step_offset = 0;
                None
            }
        };
        log::debug!("starting {id} (launch {})", self.launch_counter);
        self.launch_worker(idx, restore_path)
    }

    fn launch_worker(&mut self, idx: usize, restore_path: Option<PathBuf>) -> Result<(), EngineError> {
        let trial = &self.trials[idx];
        let spec = LaunchSpec {
            trial: trial.id.clone(),
            launch: self.slots[&trial.id].launch,
            params: trial.config.clone(),
            restore_path,
        };
        if let Err(e) = self.executor.launch(spec) {
            return self.fail_trial(idx, e.to_string());
        }
        self.send_step(idx)
    }

    fn send(&mut self, idx: usize, cmd: &Command) -> Result<(), EngineError> {
        let id = self.trials[idx].id.clone();
        if let Err(e) = self.executor.send(&id, cmd) {
            return self.fail_trial(idx, e.to_string());
        }
        Ok(())
    }

    fn send_step(&mut self, idx: usize) -> Result<(), EngineError> {
        if let Some(slot) = self.slots.get_mut(&self.trials[idx].id) {
            slot.state = SlotState::Stepping;
        }
        self.send(idx, &Command::Step)
    }

    /// Stops the worker (if any), frees the trial's resources and applies `event`.
    fn finish(&mut self, idx: usize, event: LifecycleEvent) -> Result<(), EngineError> {
        let id = self.trials[idx].id.clone();
        if self.slots.remove(&id).is_some() {
            let _ = self.executor.send(&id, &Command::Stop);
            self.executor.retire(&id);
            self.pool.release(&id)?;
        }
        self.transition(idx, event)
    }

    fn fail_trial(&mut self, idx: usize, message: String) -> Result<(), EngineError> {
        let id = self.trials[idx].id.clone();
        log::warn!("trial {id} errored: {message}");
        if self.slots.remove(&id).is_some() {
            self.executor.retire(&id);
            self.pool.release(&id)?;
        }
        if self.trials[idx].status != TrialStatus::Running {
            return Ok(());
        }
        self.transition(idx, LifecycleEvent::Error)?;
        self.trials[idx].error = Some(message);
        let mut view = TrialPoolView::new(&self.trials, self.pool.free());
        self.scheduler.on_trial_error(&self.trials[idx], &mut view);
        let actions = view.into_actions();
        self.apply_actions(actions)
    }

    fn apply_actions(&mut self, actions: PoolActions) -> Result<(), EngineError> {
        for id in actions.stop {
            let idx = self.index_of(&id)?;
            match self.trials[idx].status {
                TrialStatus::Running | TrialStatus::Paused => {
                    log::debug!("stopping {id} on scheduler request");
                    self.finish(idx, LifecycleEvent::Stop)?;
                }
                _ => {}
            }
        }
        for config in actions.suggest {
            if self.add_trial(config, TrialOrigin::Suggested)?.is_none() {
                break;
            }
        }
        for (id, tag) in actions.annotate {
            let idx = self.index_of(&id)?;
            self.trials[idx].bracket_tag = Some(tag);
        }
        Ok(())
    }

    /// Returns false for events from workers the engine has already let go.
    fn handle_event(&mut self, ev: ExecutorEvent) -> Result<bool, EngineError> {
        let Some(slot) = self.slots.get(&ev.trial) else {
            log::debug!("dropping event for retired worker of {}", ev.trial);
            return Ok(false);
        };
        if slot.launch != ev.launch {
            log::debug!("dropping event from stale launch {} of {}", ev.launch, ev.trial);
            return Ok(false);
        }
        let state = slot.state.clone();
        let idx = self.index_of(&ev.trial)?;
        match ev.kind {
            EventKind::Exited { code, stderr_tail } => {
                let code = code.map_or("a signal".to_string(), |c| format!("code {c}"));
                let tail = stderr_tail.trim_end();
                self.fail_trial(idx, format!("worker exited with {code} before done; stderr: {tail}"))?;
            }
            EventKind::Protocol(e) => self.fail_trial(idx, format!("protocol error: {e}"))?,
            EventKind::Worker(WorkerEvent::Error { message }) => self.fail_trial(idx, message)?,
            EventKind::Worker(WorkerEvent::Done) => {
                self.finish(idx, LifecycleEvent::Complete)?;
                self.notify_complete(idx)?;
            }
            EventKind::Worker(WorkerEvent::Saved { path }) => match state {
                SlotState::Saving {
                    then,
                    step,
                    worker_step,
                    ..
                } => self.on_saved(idx, path, then, step, worker_step)?,
                SlotState::Stepping => self.fail_trial(idx, "saved event without a save command".into())?,
            },
            EventKind::Worker(WorkerEvent::Result { step, metrics }) => match state {
                SlotState::Stepping => self.on_result(idx, step, metrics, ev.wall_time.unwrap_or(0.0))?,
                SlotState::Saving { .. } => {
                    self.fail_trial(idx, "result event while a save was pending".into())?
                }
            },
        }
        Ok(true)
    }

    fn notify_complete(&mut self, idx: usize) -> Result<(), EngineError> {
        let mut view = TrialPoolView::new(&self.trials, self.pool.free());
        self.scheduler.on_trial_complete(&self.trials[idx], &mut view);
        let actions = view.into_actions();
        self.apply_actions(actions)
    }

    fn on_result(&mut self, idx: usize, worker_step: u64, metrics: Metrics, wall_time: f64) -> Result<(), EngineError> {
        let trial = &mut self.trials[idx];
        let step = worker_step as i64 + trial.step_offset;
        if step < 1 {
            let message = format!("worker step {worker_step} maps to trial step {step}");
            return self.fail_trial(idx, message);
        }
        let record = ResultRecord {
            step: step as u64,
            metrics,
            wall_time,
        };
        let value = match trial.record_result(record.clone(), &self.config.objective) {
            Ok(v) => v,
            Err(e) => return self.fail_trial(idx, e.to_string()),
        };
        let line = ResultLine {
            trial: trial.id.clone(),
            step: record.step,
            metrics: record.metrics.clone(),
            wall_time,
        };
        let mut bytes = serde_json::to_vec(&line).expect("result line serializes");
        bytes.push(b'\n');
        self.results_log
            .write_all(&bytes)
            .map_err(io_err("appending to results log"))?;
        self.results_lines += 1;

        let done = record.step >= self.max_steps
            || self
                .config
                .stopping
                .objective_threshold
                .is_some_and(|t| value <= t);
        if done {
            self.finish(idx, LifecycleEvent::Complete)?;
            return self.notify_complete(idx);
        }

        let mut view = TrialPoolView::new(&self.trials, self.pool.free());
        let decision = self
            .scheduler
            .on_result(&self.trials[idx], &record, &mut view)?;
        let actions = view.into_actions();
        log::trace!("{} step {}: {}", self.trials[idx].id, record.step, decision.label());
        self.enforce(idx, decision, record.step)?;
        self.apply_actions(actions)
    }

    fn enforce(&mut self, idx: usize, decision: TrialDecision, step: u64) -> Result<(), EngineError> {
        match decision {
            TrialDecision::Continue => {
                if self.checkpoint_every.iter().any(|k| step.is_multiple_of(*k)) {
                    self.begin_save(idx, AfterSave::Continue)
                } else {
                    self.send_step(idx)
                }
            }
            TrialDecision::Pause => self.begin_save(idx, AfterSave::Pause),
            TrialDecision::Stop => self.finish(idx, LifecycleEvent::Stop),
            TrialDecision::Restart {
                new_config,
                restore_from,
            } => self.restart(idx, new_config, restore_from, step),
        }
    }

    fn begin_save(&mut self, idx: usize, then: AfterSave) -> Result<(), EngineError> {
        let trial = &self.trials[idx];
        let step = trial.last_step().unwrap_or(0);
        let worker_step = (step as i64 - trial.step_offset).max(0) as u64;
        let path = match self.store.path_for(&trial.id, step) {
            Ok(p) => p,
            Err(e) => return self.fail_trial(idx, e.to_string()),
        };
        if let Some(slot) = self.slots.get_mut(&trial.id) {
            slot.state = SlotState::Saving {
                then,
                step,
                worker_step,
                deadline: Instant::now() + SAVE_TIMEOUT,
            };
        }
        self.send(idx, &Command::Save { path })
    }

    fn on_saved(
        &mut self,
        idx: usize,
        path: PathBuf,
        then: AfterSave,
        step: u64,
        worker_step: u64,
    ) -> Result<(), EngineError> {
        match self.store.register(&mut self.trials[idx], step, worker_step, path) {
            Ok((_, evicted)) => self.doomed.extend(evicted),
            Err(e) => return self.fail_trial(idx, e.to_string()),
        }
        match then {
            AfterSave::Continue => self.send_step(idx),
            AfterSave::Pause => self.finish(idx, LifecycleEvent::Pause),
        }
    }

    fn population_ranking(&self) -> Vec<TrialId> {
        let mut pop: Vec<&Trial> = self
            .trials
            .iter()
            .filter(|t| !t.status.is_terminal() && !t.results.is_empty())
            .collect();
        pop.sort_by(|a, b| rank_key(a.ranking_objective(), &a.id).cmp(&rank_key(b.ranking_objective(), &b.id)));
        pop.into_iter().map(|t| t.id.clone()).collect()
    }

    fn restart(
        &mut self,
        idx: usize,
        new_config: Config,
        restore_from: Option<CheckpointRef>,
        step: u64,
    ) -> Result<(), EngineError> {
        let id = self.trials[idx].id.clone();
        let staged = match &restore_from {
            Some(c) => match self.store.stage_clone(c, &id) {
                Ok(p) => Some((c.clone(), p)),
                Err(e) => {
                    log::warn!("restart of {id} from {} skipped: {e}", c.trial);
                    return self.send_step(idx);
                }
            },
            None => None,
        };
        let source = staged.as_ref().map_or(id.clone(), |(c, _)| c.trial.clone());
        let checkpoint_step = staged.as_ref().map(|(c, _)| c.step);
        self.trace.push(RestartTrace {
            event: self.event_counter,
            trial: id.clone(),
            step,
            source: source.clone(),
            checkpoint_step,
            ranking: self.population_ranking(),
        });
        let line = LineageLine {
            trial: id.clone(),
            event: "restart".into(),
            source: source.clone(),
            checkpoint_step,
            new_config: new_config.clone(),
        };
        let mut bytes = serde_json::to_vec(&line).expect("lineage line serializes");
        bytes.push(b'\n');
        self.lineage_log
            .write_all(&bytes)
            .and_then(|_| self.lineage_log.flush())
            .map_err(io_err("appending to lineage log"))?;
        self.lineage_lines += 1;

        let _ = self.executor.send(&id, &Command::Stop);
        self.executor.retire(&id);
        self.launch_counter += 1;
        if let Some(slot) = self.slots.get_mut(&id) {
            slot.launch = self.launch_counter;
            slot.state = SlotState::Stepping;
        }
        let trial = &mut self.trials[idx];
        trial.config = new_config;
        let restore_path = match staged {
            Some((c, path)) => {
                trial.origin = TrialOrigin::Cloned(c.trial.clone());
                trial.step_offset = step as i64 - c.worker_step as i64;
                match self.store.register(trial, step, c.worker_step, path.clone()) {
                    Ok((_, evicted)) => self.doomed.extend(evicted),
                    Err(e) => return self.fail_trial(idx, e.to_string()),
                }
                Some(path)
            }
            None => {
                trial.step_offset = step as i64;
                None
            }
        };
        self.launch_worker(idx, restore_path)
    }
}

/// Keeps the first `keep` lines of a log that pass `retain`, returning the count kept.
fn rewrite_log(path: &Path, keep: u64, mut retain: impl FnMut(&str) -> bool) -> Result<u64, EngineError> {
    let lines: Vec<String> = match File::open(path) {
        Ok(f) => BufReader::new(f)
            .lines()
            .take(keep as usize)
            .collect::<Result<_, _>>()
            .map_err(io_err(format!("reading {}", path.display())))?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_err(format!("reading {}", path.display()))(e)),
    };
    let kept: Vec<&String> = lines.iter().filter(|l| retain(l)).collect();
    let mut text = String::new();
    for l in &kept {
        text.push_str(l);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(format!("rewriting {}", path.display())))?;
    Ok(kept.len() as u64)
}
