use std::sync::OnceLock;
use std::time::Instant;

use elicit_core::analytics::{
    response_stats, uncertainty_popularity_regression, watch_lpm, PopularityTable, POPULARITY, PREDICTED_RATING,
    UNCERTAINTY,
};
use elicit_core::simulator::{self, SimConfig, SimLogs};

use crate::ensure;
use crate::Outcome;

pub struct DefaultRun {
    pub config: SimConfig,
    pub logs: SimLogs,
    pub seconds: f64,
}

/// The simulator at its default configuration, run once and shared between checks.
pub fn default_run() -> Result<&'static DefaultRun, String> {
    static RUN: OnceLock<Result<DefaultRun, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let config = SimConfig::default();
        let start = Instant::now();
        let logs = simulator::run(&config).map_err(|e| e.to_string())?;
        Ok(DefaultRun {
            config,
            logs,
            seconds: start.elapsed().as_secs_f64(),
        })
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn within(value: f64, planted: f64, rel: f64) -> bool {
    value.signum() == planted.signum() && (value - planted).abs() <= rel * planted.abs()
}

pub fn recovery() -> Outcome {
    let run = default_run()?;
    let logs = &run.logs;
    let start = Instant::now();
    let stats = response_stats(&logs.requests, &logs.beliefs);
    let lpm = watch_lpm(&logs.beliefs, &logs.ratings).map_err(|e| e.to_string())?;
    let popularity = PopularityTable::from_ratings(&logs.ratings);
    let unc = uncertainty_popularity_regression(&logs.beliefs, &popularity).map_err(|e| e.to_string())?;
    let seconds = run.seconds + start.elapsed().as_secs_f64();

    let b1 = lpm.coefficient(PREDICTED_RATING).unwrap();
    let b2 = lpm.coefficient(UNCERTAINTY).unwrap();
    let gamma = unc.coefficient(POPULARITY).unwrap();
    let (p1, p2) = (run.config.beta1, run.config.beta2);
    let summary = format!(
        "{} responses, lpm ({b1:.4}, {b2:.4}) vs ({p1}, {p2}), uncertainty~popularity {gamma:.3}, \
         ratio mean {:.4}, {seconds:.1}s",
        stats.total_responses, stats.ratio_mean
    );
    ensure!(stats.total_responses >= 50_000, "too few responses: {summary}");
    ensure!(within(b1, p1, 0.5), "predicted-rating coefficient off: {summary}");
    ensure!(within(b2, p2, 0.5), "uncertainty coefficient off: {summary}");
    ensure!(gamma < 0.0, "uncertainty does not fall with popularity: {summary}");
    ensure!((stats.ratio_mean - 0.078).abs() <= 0.02, "response ratio off target: {summary}");
    ensure!(seconds < 120.0, "too slow: {summary}");
    Ok(summary)
}
