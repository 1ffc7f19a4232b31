//! Serves a simulated trainable over stdin/stdout.
//!
//! Usage: `tunecore-sim-worker <exp-curve|pbt-quadratic>`

use std::io::{self, BufReader};
use std::process::ExitCode;

use tunecore::executor::sim::SimKind;
use tunecore::executor::trainable::serve;

fn main() -> ExitCode {
    let Some(kind) = std::env::args().nth(1) else {
        eprintln!("usage: tunecore-sim-worker <exp-curve|pbt-quadratic>");
        return ExitCode::from(2);
    };
    let kind: SimKind = match kind.parse() {
        Ok(k) => k,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let stdin = BufReader::new(io::stdin().lock());
    match serve(stdin, io::stdout().lock(), &move |cfg| kind.build(cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::FAILURE
        }
    }
}
