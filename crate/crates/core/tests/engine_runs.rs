use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use tunecore::engine::report::{summarize_results, ResultLine};
use tunecore::engine::{Engine, EngineOptions, ExperimentConfig, RunOutcome};
use tunecore::{Config, ParamValue, TrialStatus};

fn grid_config(out: &Path, cpus: u32) -> Value {
    json!({
        "name": "grid",
        "trainable": "sim:exp-curve",
        "space": {"final_loss": {"grid": [0.3, 0.1, 0.2]}, "tau": {"grid": [1.0, 2.0]}},
        "objective": {"metric": "loss", "mode": "min"},
        "scheduler": {"kind": "fifo"},
        "resources": {"total": {"cpus": cpus}, "per_trial": {"cpus": 1}},
        "stopping": {"max_steps_per_trial": 3},
        "seed": 1,
        "output_dir": out,
    })
}

fn parse(v: &Value) -> ExperimentConfig {
    ExperimentConfig::from_json_str(&v.to_string()).unwrap()
}

fn finish(engine: &mut Engine) -> tunecore::ExperimentReport {
    match engine.run().unwrap() {
        RunOutcome::Finished(r) => r,
        other => panic!("unexpected {other:?}"),
    }
}

fn read_results(out: &Path) -> Vec<ResultLine> {
    fs::read_to_string(out.join("results.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn final_loss(config: &Config) -> f64 {
    config["final_loss"].as_f64().unwrap()
}

fn exp_curve(b: f64, tau: f64, t: f64) -> f64 {
    b + (1.0 - b) * (-t / tau).exp()
}

#[test]
fn grid_runs_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let mut engine = Engine::new(parse(&grid_config(dir.path(), 2))).unwrap();
    let report = finish(&mut engine);
    assert_eq!(report.count(TrialStatus::Completed), 6);
    let lines = read_results(dir.path());
    assert_eq!(lines.len(), 18);

    // value after 3 steps is loss(2); smallest b with tau = 1 wins
    let best = &report.trials[0];
    assert_eq!(Some(best.id.clone()), report.best_trial);
    assert_eq!(final_loss(&best.config), 0.1);
    assert_eq!(best.config["tau"], ParamValue::Real(1.0));
    assert_eq!(report.best_objective, Some(exp_curve(0.1, 1.0, 2.0)));

    let on_disk: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(on_disk["best_trial"], json!(best.id.as_str()));
}

#[test]
fn serial_capacity_gives_same_report_in_submission_order() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let wide = finish(&mut Engine::new(parse(&grid_config(a.path(), 2))).unwrap());
    let narrow = finish(&mut Engine::new(parse(&grid_config(b.path(), 1))).unwrap());
    assert_eq!(wide, narrow);
    let order: Vec<String> = read_results(b.path())
        .iter()
        .map(|l| l.trial.to_string())
        .collect();
    let expected: Vec<String> = (1..=6)
        .flat_map(|i| std::iter::repeat_n(format!("t{i}"), 3))
        .collect();
    assert_eq!(order, expected);
}

#[test]
fn worker_error_is_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = parse(&grid_config(dir.path(), 2));
    let mut configs = tunecore::space::expand_grid(&cfg.space).unwrap();
    configs[3].insert("fail_at_step".into(), ParamValue::Int(2));
    let mut engine = Engine::builder(cfg).initial_configs(configs).build().unwrap();
    let report = finish(&mut engine);
    assert_eq!(report.count(TrialStatus::Completed), 5);
    assert_eq!(report.count(TrialStatus::Errored), 1);
    let errored = report.trials.last().unwrap();
    assert_eq!(errored.id.as_str(), "t4");
    assert!(errored.error.as_deref().unwrap().contains("injected failure"));
}

#[test]
fn report_summary_ranks_by_oracle() {
    let dir = tempfile::tempdir().unwrap();
    finish(&mut Engine::new(parse(&grid_config(dir.path(), 2))).unwrap());
    let summary = summarize_results(dir.path(), 10).unwrap();
    let mut oracle: Vec<(f64, String)> = [0.3, 0.1, 0.2]
        .iter()
        .flat_map(|b| [1.0, 2.0].map(|tau| (*b, tau)))
        .enumerate()
        .map(|(i, (b, tau))| (exp_curve(b, tau, 2.0), format!("t{}", i + 1)))
        .collect();
    oracle.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let ranked: Vec<String> = summary.trials.iter().map(|t| t.id.to_string()).collect();
    let expected: Vec<String> = oracle.into_iter().map(|(_, id)| id).collect();
    assert_eq!(ranked, expected);
    assert_eq!(summarize_results(dir.path(), 1).unwrap().trials[0].id.as_str(), "t3");
}

fn crash_config(out: &Path, checkpoint_interval: Option<u64>) -> Value {
    let mut v = grid_config(out, 2);
    v["stopping"] = json!({"max_steps_per_trial": 5});
    if let Some(k) = checkpoint_interval {
        v["checkpoint"] = json!({"interval": k});
    }
    v
}

#[test]
fn crash_and_resume_matches_uninterrupted_run() {
    for interval in [None, Some(2)] {
        let base = tempfile::tempdir().unwrap();
        let mut engine = Engine::new(parse(&crash_config(base.path(), interval))).unwrap();
        let reference = finish(&mut engine);
        let total = engine.event_count();
        assert!(total >= 30);
        for kill_after in [1, 5, 7, 11, 17, 23, total - 1] {
            let dir = tempfile::tempdir().unwrap();
            let options = EngineOptions {
                halt_after_events: Some(kill_after),
                ..EngineOptions::default()
            };
            let mut engine = Engine::builder(parse(&crash_config(dir.path(), interval)))
                .options(options)
                .build()
                .unwrap();
            assert_eq!(engine.run().unwrap(), RunOutcome::Halted { events: kill_after });
            drop(engine);
            let mut resumed = Engine::resume(dir.path(), EngineOptions::default()).unwrap();
            let report = finish(&mut resumed);
            assert_eq!(report, reference, "kill after {kill_after}");
            assert_eq!(
                fs::read_to_string(dir.path().join("report.json")).unwrap(),
                fs::read_to_string(base.path().join("report.json")).unwrap()
            );
            assert_eq!(read_results(dir.path()), read_results(base.path()), "kill after {kill_after} interval {interval:?}");
        }
    }
}

#[test]
fn resume_without_intervening_events_is_identity() {
    let a = tempfile::tempdir().unwrap();
    let reference = finish(&mut Engine::new(parse(&grid_config(a.path(), 2))).unwrap());
    let b = tempfile::tempdir().unwrap();
    drop(Engine::new(parse(&grid_config(b.path(), 2))).unwrap());
    let report = finish(&mut Engine::resume(b.path(), EngineOptions::default()).unwrap());
    assert_eq!(report, reference);
}

#[test]
fn resume_from_empty_dir_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = Engine::resume(dir.path(), EngineOptions::default()).err().unwrap();
    assert!(matches!(err, tunecore::EngineError::ConfigInvalid(_)), "{err}");
}

#[test]
fn snapshot_version_is_checked() {
    let dir = tempfile::tempdir().unwrap();
    drop(Engine::new(parse(&grid_config(dir.path(), 2))).unwrap());
    let path = dir.path().join("experiment_state.json");
    let mut snap: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    snap["version"] = json!(99);
    fs::write(&path, snap.to_string()).unwrap();
    let err = Engine::resume(dir.path(), EngineOptions::default()).err().unwrap();
    assert!(matches!(err, tunecore::EngineError::SnapshotVersionMismatch { .. }), "{err}");
}

#[test]
fn snapshot_field_names() {
    let dir = tempfile::tempdir().unwrap();
    drop(Engine::new(parse(&grid_config(dir.path(), 2))).unwrap());
    let snap: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("experiment_state.json")).unwrap())
            .unwrap();
    let keys: Vec<&str> = snap.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(
        keys,
        [
            "version",
            "config",
            "event_counter",
            "launch_counter",
            "results_lines",
            "lineage_lines",
            "rng_algorithm",
            "trials",
            "scheduler",
            "suggestion"
        ]
    );
    let trial_keys: Vec<&str> = snap["trials"][0].as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(
        trial_keys,
        [
            "id",
            "config",
            "status",
            "results",
            "objectives",
            "resources",
            "checkpoints",
            "bracket_tag",
            "origin",
            "step_offset",
            "error"
        ]
    );
    assert_eq!(snap["trials"][0]["status"], json!("PENDING"));
}

#[test]
fn objective_threshold_completes_early() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = grid_config(dir.path(), 2);
    v["stopping"] = json!({"max_steps_per_trial": 50, "objective_threshold": 0.35});
    let report = finish(&mut Engine::new(parse(&v)).unwrap());
    assert_eq!(report.count(TrialStatus::Completed), 6);
    for t in &report.trials {
        let b = final_loss(&t.config);
        if b < 0.35 {
            assert!(t.best_objective.unwrap() <= 0.35);
            assert!(t.last_step.unwrap() < 50);
        }
    }
}

#[test]
fn max_concurrent_limits_parallelism() {
    let a = tempfile::tempdir().unwrap();
    let options = EngineOptions {
        max_concurrent: Some(1),
        ..EngineOptions::default()
    };
    let mut engine = Engine::builder(parse(&grid_config(a.path(), 4)))
        .options(options)
        .build()
        .unwrap();
    finish(&mut engine);
    let order: Vec<String> = read_results(a.path()).iter().map(|l| l.trial.to_string()).collect();
    assert_eq!(&order[..3], ["t1", "t1", "t1"]);
}
