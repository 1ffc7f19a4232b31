use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::snapshot::ExperimentSnapshot;
use crate::scheduler::OrderedValue;
use crate::trial::{Config, Metrics, Objective, Trial, TrialId, TrialOrigin, TrialStatus};

pub const RESULTS_FILE: &str = "results.jsonl";
pub const LINEAGE_FILE: &str = "lineage.jsonl";
pub const REPORT_FILE: &str = "report.json";

/// One line of `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultLine {
    pub trial: TrialId,
    pub step: u64,
    pub metrics: Metrics,
    pub wall_time: f64,
}

/// One line of `lineage.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageLine {
    pub trial: TrialId,
    pub event: String,
    pub source: TrialId,
    pub checkpoint_step: Option<u64>,
    pub new_config: Config,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub id: TrialId,
    pub status: TrialStatus,
    pub config: Config,
    pub origin: TrialOrigin,
    /// Best canonical (smaller is better) objective over the trial's results.
    pub best_objective: Option<f64>,
    pub last_step: Option<u64>,
    pub num_results: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Final outcome of an experiment, written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub objective: Objective,
    pub best_trial: Option<TrialId>,
    /// Canonical objective of the best trial.
    pub best_objective: Option<f64>,
    /// The same value in the metric's own orientation.
    pub best_metric: Option<f64>,
    /// Trials ranked best first; errored trials and trials without results last.
    pub trials: Vec<TrialSummary>,
}

fn rank_order(errored: bool, best: Option<f64>, id: &TrialId) -> (bool, OrderedValue, TrialId) {
    (errored, OrderedValue(best.unwrap_or(f64::INFINITY)), id.clone())
}

impl ExperimentReport {
    pub fn from_trials(name: &str, objective: &Objective, trials: &[Trial]) -> Self {
        let mut rows: Vec<TrialSummary> = trials
            .iter()
            .map(|t| TrialSummary {
                id: t.id.clone(),
                status: t.status,
                config: t.config.clone(),
                origin: t.origin.clone(),
                best_objective: t.best_objective(),
                last_step: t.last_step(),
                num_results: t.results.len(),
                error: t.error.clone(),
            })
            .collect();
        rows.sort_by_key(|r| rank_order(r.status == TrialStatus::Errored, r.best_objective, &r.id));
        let best = rows
            .iter()
            .find(|r| r.status != TrialStatus::Errored && r.best_objective.is_some());
        Self {
            name: name.to_string(),
            objective: objective.clone(),
            best_trial: best.map(|r| r.id.clone()),
            best_objective: best.and_then(|r| r.best_objective),
            best_metric: best
                .and_then(|r| r.best_objective)
                .map(|v| objective.decanonicalize(v)),
            trials: rows,
        }
    }

    pub fn count(&self, status: TrialStatus) -> usize {
        self.trials.iter().filter(|t| t.status == status).count()
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no result log at {0}")]
    MissingLog(PathBuf),
    #[error("reading results: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedTrial {
    pub rank: usize,
    pub id: TrialId,
    pub config: Option<Config>,
    pub best_objective: f64,
    pub best_metric: f64,
    pub status: Option<TrialStatus>,
    pub num_results: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultsSummary {
    pub objective: Objective,
    pub trials: Vec<RankedTrial>,
    pub corrupt_lines: usize,
}

/// Ranks the trials in `<outdir>/results.jsonl` by best canonical objective,
/// ties broken by trial id. Configs and statuses come from the experiment
/// snapshot when one is present.
pub fn summarize_results(outdir: &Path, top_n: usize) -> Result<ResultsSummary, ReportError> {
    let path = outdir.join(RESULTS_FILE);
    let file = match fs::File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(ReportError::MissingLog(path)),
        Err(e) => return Err(e.into()),
    };
    let snapshot = ExperimentSnapshot::read(outdir).ok();
    let objective = snapshot
        .as_ref()
        .map(|s| s.config.objective.clone())
        .unwrap_or_else(|| Objective::minimize("loss"));

    let mut best: BTreeMap<TrialId, (f64, usize)> = BTreeMap::new();
    let mut corrupt_lines = 0;
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<ResultLine>(&line)
            .ok()
            .and_then(|r| objective.canonical_of(&r.metrics).ok().map(|v| (r.trial, v)));
        match parsed {
            Some((trial, v)) => {
                let entry = best.entry(trial).or_insert((f64::INFINITY, 0));
                entry.0 = entry.0.min(v);
                entry.1 += 1;
            }
            None => corrupt_lines += 1,
        }
    }
    if corrupt_lines > 0 {
        log::warn!("skipped {corrupt_lines} corrupt line(s) in {}", path.display());
    }

    let lookup = |id: &TrialId| {
        snapshot
            .as_ref()
            .and_then(|s| s.trials.iter().find(|t| &t.id == id))
    };
    let mut ranked: Vec<(TrialId, f64, usize)> =
        best.into_iter().map(|(id, (v, n))| (id, v, n)).collect();
    ranked.sort_by(|a, b| (OrderedValue(a.1), &a.0).cmp(&(OrderedValue(b.1), &b.0)));
    let trials = ranked
        .into_iter()
        .take(top_n)
        .enumerate()
        .map(|(i, (id, v, n))| {
            let known = lookup(&id);
            RankedTrial {
                rank: i + 1,
                config: known.map(|t| t.config.clone()),
                status: known.map(|t| t.status),
                best_objective: v,
                best_metric: objective.decanonicalize(v),
                num_results: n,
                id,
            }
        })
        .collect();
    Ok(ResultsSummary {
        objective,
        trials,
        corrupt_lines,
    })
}

fn config_text(config: &Config) -> String {
    config
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn format_summary_table(summary: &ResultsSummary) -> String {
    let mut out = format!(
        "{:<4} {:<10} {:<10} {:>14}  {}\n",
        "rank", "trial", "status", summary.objective.metric, "config"
    );
    for t in &summary.trials {
        let _ = writeln!(
            out,
            "{:<4} {:<10} {:<10} {:>14.6}  {}",
            t.rank,
            t.id.as_str(),
            t.status.map(|s| s.to_string()).unwrap_or_else(|| "?".into()),
            t.best_metric,
            t.config.as_ref().map(config_text).unwrap_or_default()
        );
    }
    out
}

/// One line per trial: id, status, last step, best canonical objective, config.
pub fn format_progress_table(trials: &[Trial]) -> String {
    let mut out = format!(
        "{:<10} {:<10} {:>6} {:>14}  {}\n",
        "trial", "status", "step", "best", "config"
    );
    for t in trials {
        let best = t
            .best_objective()
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<10} {:<10} {:>6} {:>14}  {}",
            t.id.as_str(),
            t.status.to_string(),
            t.last_step().unwrap_or(0),
            best,
            config_text(&t.config)
        );
    }
    out
}
