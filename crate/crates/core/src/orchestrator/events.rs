//! Run events and the hash-chained line log.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::canonical::canonical_compact;
use crate::eligibility::{DecisionReason, EligibilityPolicy, WorkerId};
use crate::population::QuotaSpec;
use crate::scheduler::{Action, Cause, RunState, Schedule, DEFAULT_GRACE_MINUTES};
use crate::workflow::Workflow;
use crate::Timestamp;

fn default_grace() -> u32 {
    DEFAULT_GRACE_MINUTES
}

/// Everything a run is deployed with. Frozen into the DEPLOYED event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub workflow: Workflow,
    pub policy: EligibilityPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quota: Option<QuotaSpec>,
    #[serde(default)]
    pub schedule: Schedule,
    pub seed: u64,
    pub adapter: String,
    #[serde(default = "default_grace")]
    pub grace_minutes: u32,
}

impl RunConfig {
    pub fn new(workflow: Workflow, policy: EligibilityPolicy, adapter: &str, seed: u64) -> Self {
        Self {
            workflow,
            policy,
            quota: None,
            schedule: Schedule::Always,
            seed,
            adapter: adapter.to_string(),
            grace_minutes: DEFAULT_GRACE_MINUTES,
        }
    }

    pub fn with_quota(mut self, quota: QuotaSpec) -> Self {
        self.quota = Some(quota);
        self
    }

    pub fn with_schedule(mut self, schedule: Schedule) -> Self {
        self.schedule = schedule;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DenyReason {
    ScheduleClosed,
    RunNotRunning,
    NodeClosed,
    DenyPopulationFilter,
    DenyReturning,
    DenyCrossover,
    DenyCompletedAll,
    DenyQuota,
    NoUnitsLeft,
    /// A judgment for a unit the worker does not currently hold.
    UnexpectedJudgment,
    LateJudgment,
    GraceExpired,
    InvalidAnswer,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::ScheduleClosed => "SCHEDULE_CLOSED",
            DenyReason::RunNotRunning => "RUN_NOT_RUNNING",
            DenyReason::NodeClosed => "NODE_CLOSED",
            DenyReason::DenyPopulationFilter => "DENY_POPULATION_FILTER",
            DenyReason::DenyReturning => "DENY_RETURNING",
            DenyReason::DenyCrossover => "DENY_CROSSOVER",
            DenyReason::DenyCompletedAll => "DENY_COMPLETED_ALL",
            DenyReason::DenyQuota => "DENY_QUOTA",
            DenyReason::NoUnitsLeft => "NO_UNITS_LEFT",
            DenyReason::UnexpectedJudgment => "UNEXPECTED_JUDGMENT",
            DenyReason::LateJudgment => "LATE_JUDGMENT",
            DenyReason::GraceExpired => "GRACE_EXPIRED",
            DenyReason::InvalidAnswer => "INVALID_ANSWER",
        }
    }

    pub(crate) fn from_eligibility(r: DecisionReason) -> Self {
        match r {
            DecisionReason::DenyReturning => DenyReason::DenyReturning,
            DecisionReason::DenyCrossover => DenyReason::DenyCrossover,
            DecisionReason::DenyCompletedAll => DenyReason::DenyCompletedAll,
            DecisionReason::DenyPopulationFilter => DenyReason::DenyPopulationFilter,
            DecisionReason::NewWorker | DecisionReason::ReturningPermitted => {
                unreachable!("allow reasons are not denials")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventBody {
    Deployed(Box<RunConfig>),
    Lifecycle {
        action: Action,
        state: RunState,
        cause: Cause,
    },
    TaskCreated {
        node_id: String,
        task: String,
    },
    WorkerArrival {
        node_id: String,
        task: String,
        platform_worker: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fingerprint: Option<String>,
        country: String,
        trust: f64,
        worker: WorkerId,
        continuation: bool,
    },
    WorkerMerged {
        absorbed: WorkerId,
        survivor: WorkerId,
    },
    Admitted {
        worker: WorkerId,
        node_id: String,
        platform_worker: String,
        reason: DecisionReason,
        country: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reservation: Option<String>,
        continuation: bool,
    },
    Denied {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        worker: Option<WorkerId>,
        node_id: String,
        platform_worker: String,
        reason: DenyReason,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        unit_id: Option<String>,
    },
    UnitAssigned {
        worker: WorkerId,
        node_id: String,
        platform_worker: String,
        unit_id: String,
    },
    Judgment {
        worker: WorkerId,
        node_id: String,
        group_id: String,
        unit_id: String,
        platform_worker: String,
        answer: String,
        decision_time_seconds: f64,
        country: String,
        grace: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gold_correct: Option<bool>,
    },
    ReservationExpired {
        worker: WorkerId,
        node_id: String,
        platform_worker: String,
        unit_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reservation: Option<String>,
    },
    SessionEnded {
        worker: WorkerId,
        node_id: String,
        platform_worker: String,
        reason: String,
    },
    LambdaApplied {
        from: String,
        to: String,
        lambda: String,
        units_in: usize,
        units_out: usize,
        unresolved: u64,
        cross_group: bool,
    },
    StageAdvanced {
        stage: usize,
        nodes: Vec<String>,
    },
    RunCompleted {
        sink_units: usize,
        unresolved_units: u64,
    },
    Warning {
        message: String,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::Deployed(_) => "DEPLOYED",
            EventBody::Lifecycle { .. } => "LIFECYCLE",
            EventBody::TaskCreated { .. } => "TASK_CREATED",
            EventBody::WorkerArrival { .. } => "WORKER_ARRIVAL",
            EventBody::WorkerMerged { .. } => "WORKER_MERGED",
            EventBody::Admitted { .. } => "ADMITTED",
            EventBody::Denied { .. } => "DENIED",
            EventBody::UnitAssigned { .. } => "UNIT_ASSIGNED",
            EventBody::Judgment { .. } => "JUDGMENT",
            EventBody::ReservationExpired { .. } => "RESERVATION_EXPIRED",
            EventBody::SessionEnded { .. } => "SESSION_ENDED",
            EventBody::LambdaApplied { .. } => "LAMBDA_APPLIED",
            EventBody::StageAdvanced { .. } => "STAGE_ADVANCED",
            EventBody::RunCompleted { .. } => "RUN_COMPLETED",
            EventBody::Warning { .. } => "WARNING",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    pub seq: u64,
    pub time: Timestamp,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LogError {
    #[error("line {line}: malformed event: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: expected seq {expected}, found {found}")]
    SeqGap { line: usize, expected: u64, found: u64 },
    #[error("line {line}: chain hash mismatch")]
    HashMismatch { line: usize },
}

/// Hash of an event line given the previous line's hash. The empty string
/// seeds the chain.
pub fn chain_hash(prev: &str, event: &RunEvent) -> String {
    let body = canonical_compact(&serde_json::to_value(event).expect("events serialize"));
    let mut h = Sha256::new();
    h.update(prev.as_bytes());
    h.update(b"\n");
    h.update(body.as_bytes());
    hex::encode(h.finalize())
}

/// One log line: the canonical event object with its `hash` field.
pub fn encode_line(prev: &str, event: &RunEvent) -> (String, String) {
    let hash = chain_hash(prev, event);
    let mut v = serde_json::to_value(event).expect("events serialize");
    v.as_object_mut()
        .expect("events are objects")
        .insert("hash".into(), Value::String(hash.clone()));
    (canonical_compact(&v), hash)
}

/// Parses one line and checks it against the chain. Returns the event and
/// its hash.
pub fn decode_line(line_no: usize, prev: &str, expected_seq: u64, line: &str) -> Result<(RunEvent, String), LogError> {
    let malformed = |message: String| LogError::Malformed {
        line: line_no,
        message,
    };
    let mut v: Value = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let hash = match v.as_object_mut().and_then(|o| o.remove("hash")) {
        Some(Value::String(h)) => h,
        _ => return Err(malformed("missing hash".into())),
    };
    let event: RunEvent = serde_json::from_value(v).map_err(|e| malformed(e.to_string()))?;
    if event.seq != expected_seq {
        return Err(LogError::SeqGap {
            line: line_no,
            expected: expected_seq,
            found: event.seq,
        });
    }
    if chain_hash(prev, &event) != hash {
        return Err(LogError::HashMismatch { line: line_no });
    }
    Ok((event, hash))
}

/// Append-only, in-memory event log with its chain head.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    lines: Vec<String>,
    head: String,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, event: &RunEvent) {
        let (line, hash) = encode_line(&self.head, event);
        self.lines.push(line);
        self.head = hash;
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn head(&self) -> &str {
        &self.head
    }

    /// Lines joined with trailing newlines, as written to disk.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }

    /// Verifies a whole log and returns its events.
    pub fn parse(text: &str) -> Result<(Self, Vec<RunEvent>), LogError> {
        let mut log = Self::new();
        let mut events = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (ev, hash) = decode_line(i + 1, &log.head, events.len() as u64 + 1, line)?;
            log.lines.push(line.to_string());
            log.head = hash;
            events.push(ev);
        }
        Ok((log, events))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse_time;

    fn ev(seq: u64, msg: &str) -> RunEvent {
        RunEvent {
            seq,
            time: parse_time("2019-05-01T00:00:00Z").unwrap(),
            body: EventBody::Warning {
                message: msg.into(),
            },
        }
    }

    #[test]
    fn line_shape() {
        let mut log = EventLog::new();
        log.append(&ev(1, "a"));
        let v: Value = serde_json::from_str(&log.lines()[0]).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["hash", "kind", "payload", "seq", "time"]);
        assert_eq!(v["kind"], "WARNING");
        assert_eq!(v["payload"]["message"], "a");
    }

    #[test]
    fn roundtrip_and_tamper_detection() {
        let mut log = EventLog::new();
        for i in 1..=3 {
            log.append(&ev(i, &format!("m{i}")));
        }
        let (back, events) = EventLog::parse(&log.to_text()).unwrap();
        assert_eq!(back, log);
        assert_eq!(events.len(), 3);

        let tampered = log.to_text().replace("m2", "mX");
        assert_eq!(
            EventLog::parse(&tampered).unwrap_err(),
            LogError::HashMismatch { line: 2 }
        );
        let gap: String = log
            .lines()
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != 1)
            .map(|(_, l)| format!("{l}\n"))
            .collect();
        assert!(matches!(
            EventLog::parse(&gap).unwrap_err(),
            LogError::SeqGap { line: 2, expected: 2, found: 3 }
        ));
    }
}
