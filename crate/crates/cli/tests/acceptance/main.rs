//! Acceptance gate: one check per criterion, each printing a single PASS/FAIL line.
//!
//! Runs without the libtest harness so the summary lines are always visible.
//! `cargo test -p elicit --test acceptance -- 7` runs only the checks whose number or
//! name contains one of the given filters.

mod choice;
mod durability;
mod pool;
mod sampling;
mod stats;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

/// Outcome of one criterion: `Ok(detail)` or `Err(reason)`.
pub type Outcome = Result<String, String>;

/// Fails with a formatted reason unless `cond` holds.
#[macro_export]
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

struct Check {
    number: u32,
    name: &'static str,
    run: fn() -> Outcome,
}

const CHECKS: &[Check] = &[
    Check { number: 1, name: "pool quotas", run: pool::quotas },
    Check { number: 2, name: "pool size and monthly rebuild", run: pool::size_and_schedule },
    Check { number: 3, name: "trendy and rating scores", run: pool::score_fixtures },
    Check { number: 4, name: "batch law", run: sampling::batch_law },
    Check { number: 5, name: "exclusion rule replay", run: sampling::exclusion_replay },
    Check { number: 6, name: "choice model", run: choice::choice_model },
    Check { number: 7, name: "statistics recovery", run: stats::recovery },
    Check { number: 8, name: "dataset round-trip and validation", run: dataset::round_trip },
    Check { number: 9, name: "service durability", run: durability::kill_restart },
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = CHECKS.iter().filter(|c| {
        filters.is_empty() || filters.iter().any(|f| c.number.to_string() == *f || c.name.contains(f.as_str()))
    });

    let mut failed = 0;
    let mut ran = 0;
    for check in selected {
        ran += 1;
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check.run))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[{}] {:<34} PASS  {detail} ({secs:.1}s)", check.number, check.name),
            Err(reason) => {
                failed += 1;
                println!("[{}] {:<34} FAIL  {reason} ({secs:.1}s)", check.number, check.name);
            }
        }
    }
    println!("acceptance: {} passed, {} failed", ran - failed, failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn panic_message(payload: &Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".to_string())
}
