//! The run engine.
//!
//! A run is event-sourced: [`Run::apply`] folds [`RunEvent`]s into state, and
//! every decision the engine makes is first written as an event and then
//! applied. Replaying a log therefore reproduces the live state exactly.

mod driver;
mod engine;
mod events;
mod state;

pub use driver::Driver;
pub use engine::{assign_unit, assignment_rng, deploy, Step};
pub use events::{
    chain_hash, decode_line, encode_line, DenyReason, EventBody, EventLog, LogError, RunConfig, RunEvent,
};
pub use state::{
    planned_judgments, ActiveAssignment, NodeState, NodeStatus, ReplayError, Run, Session, UnitState, RUN_SCOPE,
};

use crate::adapters::AdapterError;
use crate::population::QuotaError;
use crate::scheduler::{ScheduleError, TransitionError};
use crate::workflow::{LambdaError, Violation};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OrchestratorError {
    #[error("workflow has violations: {}", list(.0))]
    Invalid(Vec<Violation>),
    #[error("invalid schedule: {0}")]
    Schedule(#[from] ScheduleError),
    #[error("quota: {0}")]
    Quota(#[from] QuotaError),
    #[error("quota attribute `{0}` is not supported")]
    UnsupportedAttribute(String),
    #[error("routing: {0}")]
    Routing(#[from] LambdaError),
    #[error("unknown task ref `{0}`")]
    UnknownTask(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error("state: {0}")]
    Replay(#[from] ReplayError),
    #[error("adapter: {0}")]
    Adapter(#[from] AdapterError),
}

fn list(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Rebuilds a run from its events.
pub fn replay(events: &[RunEvent]) -> Result<Run, ReplayError> {
    let (first, rest) = events.split_first().ok_or(ReplayError::Empty)?;
    let mut run = Run::from_deployed(first)?;
    for ev in rest {
        run.apply(ev)?;
    }
    Ok(run)
}

/// Verifies the chain of a log text and rebuilds the run.
pub fn replay_text(text: &str) -> Result<(Run, EventLog), ReplayError> {
    let (log, events) = EventLog::parse(text)?;
    Ok((replay(&events)?, log))
}

#[cfg(test)]
mod tests;
