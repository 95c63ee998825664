//! Runs every reference scenario at the frozen seed and prints its metrics.
//!
//! `cargo run --release -p crowdflow-core --example scenarios -- [seed]`

use std::time::Instant;

use crowdflow_core::adapters::CrowdModel;
use crowdflow_core::analytics::report;
use crowdflow_core::orchestrator::EventLog;
use crowdflow_core::scenarios::{run, Scenario, SEED};

fn main() {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(SEED);
    for scenario in Scenario::ALL {
        let t = Instant::now();
        let d = run(scenario, CrowdModel::calibrated(), seed).unwrap();
        let (_, events) = EventLog::parse(&d.log.to_text()).unwrap();
        let r = report(&[events]).unwrap();
        println!(
            "{:<17} {:?} judgments={} workers={} returning={:.3} crossover={:.3} top3={:.3} max_share={:.4} tz={:.2}h grace={} ({:.1}s)",
            scenario.name(),
            d.run.state(),
            r.judgments,
            r.workers,
            r.returning_rate,
            r.crossover_rate,
            r.concentration[0].top_3_share,
            r.concentration[0].max_share(),
            r.timezone_balance.max_mean_difference,
            r.grace_judgments,
            t.elapsed().as_secs_f64()
        );
    }
}
