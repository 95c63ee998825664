//! Sweeps crowd-model parameters against the uncontrolled reference run.
//!
//! `cargo run --release -p crowdflow-core --example calibrate -- [seeds]`

use std::time::Instant;

use crowdflow_core::adapters::CrowdModel;
use crowdflow_core::analytics::{judgments, report, returning_effect_of};
use crowdflow_core::orchestrator::EventLog;
use crowdflow_core::scenarios::{run, Scenario, SEED};

fn main() {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let list = |var: &str, default: f64| -> Vec<f64> {
        std::env::var(var)
            .map(|v| v.split(',').filter_map(|x| x.parse().ok()).collect())
            .unwrap_or_else(|_| vec![default])
    };
    let base = CrowdModel::calibrated();
    for p in list("P_RETURN", base.p_return) {
        for x in list("P_CROSS", base.p_cross_seek) {
        for c in list("P_CONT", base.p_continue) {
        for s in 0..seeds {
            let mut model = CrowdModel::calibrated();
            model.p_continue = c;
            model.p_return = p;
            model.p_cross_seek = x;
            let t = Instant::now();
            let seed = SEED + s;
            let d = run(Scenario::Uncontrolled, model, seed).unwrap();
            let (_, events) = EventLog::parse(&d.log.to_text()).unwrap();
            let logs = vec![events];
            let r = report(&logs).unwrap();
            let e = returning_effect_of(&judgments(&logs).unwrap()).unwrap();
            println!(
                "p_return={p} p_cross={x} p_cont={c} seed={seed} state={:?} judgments={} workers={} returning={:.3} crossover={:.3} top3={:.3} tz={:.1}h hours={:.1} med new/ret={:.1}/{:.1} p={:.2e} acc new/ret={:.3}/{:.3} ({:.1}s)",
                d.run.state(),
                r.judgments,
                r.workers,
                r.returning_rate,
                r.crossover_rate,
                r.concentration[0].top_3_share,
                r.timezone_balance.max_mean_difference,
                (d.run.last_time - crowdflow_core::scenarios::start()).num_minutes() as f64 / 60.0,
                e.new_median_time,
                e.returning_median_time,
                e.p_value,
                e.new_accuracy.unwrap_or(0.0),
                e.returning_accuracy.unwrap_or(0.0),
                t.elapsed().as_secs_f64()
            );
        }
        }
        }
    }
}
