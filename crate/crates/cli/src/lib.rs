//! Command implementations behind the `tunecore` binary.
//!
//! Every command returns an exit status: 0 on success, 1 when the experiment
//! itself fails, 2 when the input (config file, output directory) is unusable.

use std::fs;
use std::io::Write;
use std::path::Path;

use tunecore::engine::report::{format_summary_table, summarize_results, ReportError};
use tunecore::engine::{Engine, EngineError, EngineOptions, ExperimentConfig, RunOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_EXPERIMENT: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum ReportFormat {
    #[default]
    Table,
    Json,
}

fn one_line(msg: impl ToString) -> String {
    msg.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn engine_exit(e: &EngineError) -> i32 {
    match e {
        EngineError::ConfigInvalid(_) | EngineError::SnapshotVersionMismatch { .. } => EXIT_CONFIG,
        _ => EXIT_EXPERIMENT,
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let config = ExperimentConfig::from_json_str(&text).map_err(|e| e.to_string())?;
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

fn drive(engine: Result<Engine, EngineError>, err: &mut dyn Write) -> i32 {
    let outcome = engine.and_then(|mut e| e.run());
    match outcome {
        Ok(RunOutcome::Finished(report)) => {
            if let Some(best) = &report.best_trial {
                log::info!("best trial {best}: {:?}", report.best_metric);
            }
            EXIT_OK
        }
        Ok(RunOutcome::Halted { events }) => {
            let _ = writeln!(err, "error: experiment halted after {events} events");
            EXIT_EXPERIMENT
        }
        Err(e) => {
            let _ = writeln!(err, "error: {}", one_line(&e));
            engine_exit(&e)
        }
    }
}

/// `run <config.json>`: validates the config, runs the experiment to the end,
/// prints the progress table and writes `<output_dir>/report.json`.
pub fn cmd_run(config_path: &Path, err: &mut dyn Write) -> i32 {
    let config = match load_config(config_path) {
        Ok(c) => c,
        Err(msg) => {
            let _ = writeln!(err, "config error: {}", one_line(msg));
            return EXIT_CONFIG;
        }
    };
    let options = EngineOptions {
        progress: true,
        ..EngineOptions::default()
    };
    drive(Engine::builder(config).options(options).build(), err)
}

/// `resume <outdir>`: continues an interrupted experiment from its snapshot.
pub fn cmd_resume(outdir: &Path, max_concurrent: Option<usize>, err: &mut dyn Write) -> i32 {
    let options = EngineOptions {
        progress: true,
        max_concurrent,
        ..EngineOptions::default()
    };
    drive(Engine::resume(outdir, options), err)
}

/// `report <outdir>`: ranks the trials found in the result log.
pub fn cmd_report(
    outdir: &Path,
    top_n: usize,
    format: ReportFormat,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let summary = match summarize_results(outdir, top_n) {
        Ok(s) => s,
        Err(e @ ReportError::MissingLog(_)) => {
            let _ = writeln!(err, "error: {}", one_line(e));
            return EXIT_CONFIG;
        }
        Err(e) => {
            let _ = writeln!(err, "error: {}", one_line(e));
            return EXIT_EXPERIMENT;
        }
    };
    let text = match format {
        ReportFormat::Table => format_summary_table(&summary),
        ReportFormat::Json => serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    };
    if out.write_all(text.as_bytes()).is_err() {
        return EXIT_EXPERIMENT;
    }
    if summary.corrupt_lines > 0 {
        let _ = writeln!(err, "warning: skipped {} corrupt line(s)", summary.corrupt_lines);
    }
    EXIT_OK
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("TUNECORE_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}
