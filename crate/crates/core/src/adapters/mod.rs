//! The platform boundary.
//!
//! An [`Adapter`] accepts [`AdapterCommand`]s and yields a time-ordered stream
//! of [`AdapterEvent`]s. The orchestrator owns the clock: it asks the adapter
//! for the next event up to some instant and issues commands stamped with
//! the time of the event that caused them.

mod model;
mod sim;

use serde::{Deserialize, Serialize};

use crate::workflow::{DataUnit, TaskNode};
use crate::Timestamp;

pub use model::{CrowdModel, DecisionTimeParams, Drift, ModelError};
pub use sim::{simulate, CrowdSimulator, SimTaskSpec};

pub type TaskRef = String;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdapterCommand {
    CreateTask {
        node: TaskNode,
        units: Vec<DataUnit>,
    },
    Launch {
        task: TaskRef,
    },
    Pause {
        task: TaskRef,
    },
    Resume {
        task: TaskRef,
    },
    /// Make the task invisible to workers. Not every adapter supports it.
    Hide {
        task: TaskRef,
    },
    /// Answer an admitted arrival with the unit to work on.
    AssignUnit {
        task: TaskRef,
        worker: String,
        unit_id: String,
    },
    RejectWorker {
        task: TaskRef,
        worker: String,
        reason: String,
    },
    Cancel {
        task: TaskRef,
    },
}

impl AdapterCommand {
    pub fn kind(&self) -> &'static str {
        match self {
            AdapterCommand::CreateTask { .. } => "CREATE_TASK",
            AdapterCommand::Launch { .. } => "LAUNCH",
            AdapterCommand::Pause { .. } => "PAUSE",
            AdapterCommand::Resume { .. } => "RESUME",
            AdapterCommand::Hide { .. } => "HIDE",
            AdapterCommand::AssignUnit { .. } => "ASSIGN_UNIT",
            AdapterCommand::RejectWorker { .. } => "REJECT_WORKER",
            AdapterCommand::Cancel { .. } => "CANCEL",
        }
    }

    pub fn task(&self) -> Option<&str> {
        match self {
            AdapterCommand::CreateTask { .. } => None,
            AdapterCommand::Launch { task }
            | AdapterCommand::Pause { task }
            | AdapterCommand::Resume { task }
            | AdapterCommand::Hide { task }
            | AdapterCommand::Cancel { task }
            | AdapterCommand::AssignUnit { task, .. }
            | AdapterCommand::RejectWorker { task, .. } => Some(task),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    /// Set for CREATE_TASK: the platform's reference for the new task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AdapterEventKind {
    TaskCreated {
        node_id: String,
        task: TaskRef,
    },
    WorkerArrival {
        task: TaskRef,
        worker: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fingerprint: Option<String>,
        country: String,
        trust: f64,
    },
    JudgmentSubmitted {
        task: TaskRef,
        worker: String,
        unit_id: String,
        answer: String,
        decision_time_seconds: f64,
    },
    WorkerAbandoned {
        task: TaskRef,
        worker: String,
    },
    /// Synthesized by the orchestrator's clock, never by an adapter.
    ClockTick,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterEvent {
    pub time: Timestamp,
    #[serde(flatten)]
    pub kind: AdapterEventKind,
}

impl AdapterEvent {
    pub fn tick(time: Timestamp) -> Self {
        Self {
            time,
            kind: AdapterEventKind::ClockTick,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdapterError {
    #[error("unknown task ref `{0}`")]
    UnknownTask(String),
    #[error("{adapter} does not support {command}")]
    Unsupported { adapter: String, command: String },
    #[error("no open session for worker `{worker}` on `{task}`")]
    NoSession { task: String, worker: String },
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport {
        attempts: u32,
        retryable: bool,
        message: String,
    },
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("mapping error for {command}: {message}")]
    Mapping { command: String, message: String },
}

pub trait Adapter {
    fn name(&self) -> &str;

    /// Executes a command issued at `at`.
    fn execute(&mut self, at: Timestamp, command: &AdapterCommand) -> Result<Ack, AdapterError>;

    /// The next event with `time <= until`, if any. Events come out in
    /// nondecreasing time order.
    fn next_event(&mut self, until: Timestamp) -> Result<Option<AdapterEvent>, AdapterError>;
}

impl<A: Adapter + ?Sized> Adapter for Box<A> {
    fn name(&self) -> &str {
        (**self).name()
    }

    fn execute(&mut self, at: Timestamp, command: &AdapterCommand) -> Result<Ack, AdapterError> {
        (**self).execute(at, command)
    }

    fn next_event(&mut self, until: Timestamp) -> Result<Option<AdapterEvent>, AdapterError> {
        (**self).next_event(until)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn event_json_shape() {
        let ev = AdapterEvent {
            time: crate::parse_time("2019-05-01T10:00:00Z").unwrap(),
            kind: AdapterEventKind::WorkerAbandoned {
                task: "t1".into(),
                worker: "p1".into(),
            },
        };
        let v = serde_json::to_value(&ev).unwrap();
        assert_eq!(v["kind"], "WORKER_ABANDONED");
        assert_eq!(v["task"], "t1");
        let back: AdapterEvent = serde_json::from_value(v).unwrap();
        assert_eq!(back, ev);
    }

    #[test]
    fn command_json_shape() {
        let c = AdapterCommand::RejectWorker {
            task: "t".into(),
            worker: "w".into(),
            reason: "DENY_CROSSOVER".into(),
        };
        let v = serde_json::to_value(&c).unwrap();
        assert_eq!(v["kind"], c.kind());
        assert_eq!(c.task(), Some("t"));
    }
}
