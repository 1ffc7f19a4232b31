use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tunecore_cli::{cmd_report, cmd_resume, cmd_run, init_logging, ReportFormat};

/// Hyperparameter search experiments from a JSON config.
///
/// Set TUNECORE_LOG=info or TUNECORE_LOG=debug for more output.
#[derive(Parser)]
#[command(name = "tunecore", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment described by a config file.
    Run { config: PathBuf },
    /// Continue an interrupted experiment from its output directory.
    Resume {
        outdir: PathBuf,
        /// Cap on simultaneously running trials.
        #[arg(long)]
        max_concurrent: Option<usize>,
    },
    /// Rank the trials of an experiment by best objective.
    Report {
        outdir: PathBuf,
        #[arg(long, default_value_t = 5)]
        top: usize,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        format: ReportFormat,
    },
}

fn main() -> ExitCode {
    init_logging();
    let cli = Cli::parse();
    let mut err = io::stderr();
    let code = match cli.command {
        Cmd::Run { config } => cmd_run(&config, &mut err),
        Cmd::Resume {
            outdir,
            max_concurrent,
        } => cmd_resume(&outdir, max_concurrent, &mut err),
        Cmd::Report { outdir, top, format } => {
            cmd_report(&outdir, top, format, &mut io::stdout(), &mut err)
        }
    };
    ExitCode::from(code as u8)
}
