//! Writes the reference workflow documents and the interleaved schedule.
//!
//! `cargo run -p crowdflow-core --example export_workflows -- <dir>`

use std::path::PathBuf;

use crowdflow_core::scenarios::{interleaved_schedule, interleaved_workflow, sequential_workflow, start};
use crowdflow_core::workflow::serialize;

fn main() -> std::io::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| ".".into()));
    std::fs::create_dir_all(&dir)?;
    for wf in [sequential_workflow(), interleaved_workflow()] {
        std::fs::write(dir.join(format!("{}.json", wf.workflow_id)), serialize(&wf))?;
    }
    let schedule = serde_json::to_string_pretty(&interleaved_schedule(start())).expect("schedule serializes");
    std::fs::write(dir.join("interleaved-schedule.json"), schedule + "\n")?;
    Ok(())
}
