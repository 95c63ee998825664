//! One run's live state: its driver, the persisted prefix of its log, and
//! what recovery found on disk.

use std::collections::BTreeMap;
use std::time::Instant;

use chrono::Duration;
use crowdflow_core::adapters::{Adapter, AdapterError, CrowdModel, CrowdSimulator};
use crowdflow_core::analytics::{self, AnalyticsError, BiasReport};
use crowdflow_core::orchestrator::{
    decode_line, replay, Driver, EventBody, EventLog, NodeStatus, OrchestratorError, Run, RunEvent,
};
use crowdflow_core::population::QuotaCounts;
use crowdflow_core::scheduler::{Action, Cause, RunState};
use crowdflow_core::Timestamp;
use crowdflow_remote::{MappingProfile, RemoteAdapter, RetryPolicy};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::ServiceError;
use crate::store::{RunRecord, Store};

pub type BoxAdapter = Box<dyn Adapter + Send>;

/// Adapter construction shared by deploy and recovery.
#[derive(Debug, Clone, Default)]
pub struct Adapters {
    pub remote: Option<MappingProfile>,
    pub retry: RetryPolicy,
}

impl Adapters {
    pub fn names(&self) -> Vec<String> {
        let mut v = vec!["sim".to_string()];
        v.extend(self.remote.as_ref().map(|p| p.name.clone()));
        v
    }

    pub fn is_sim(name: &str) -> bool {
        name == "sim"
    }

    pub fn make(&self, record: &RunRecord) -> Result<BoxAdapter, ServiceError> {
        if Self::is_sim(&record.adapter) {
            let model = record.model.clone().unwrap_or_else(CrowdModel::calibrated);
            return Ok(Box::new(CrowdSimulator::new(model, record.seed)));
        }
        match &self.remote {
            Some(p) if p.name == record.adapter => Ok(Box::new(RemoteAdapter::new(p.clone(), self.retry))),
            _ => Err(ServiceError::BadRequest(format!(
                "unknown adapter `{}` (available: {})",
                record.adapter,
                self.names().join(", ")
            ))),
        }
    }
}

/// What startup recovery did to a run's log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Recovery {
    /// Events kept.
    pub events: usize,
    /// Bytes of an incomplete trailing line that were cut off.
    pub torn_bytes: u64,
    /// Whole events dropped because they ended mid-step.
    pub dropped_events: usize,
    pub state_hash: String,
}

pub enum Progress {
    Advanced,
    /// Nothing to do right now; try again later.
    Waiting,
    /// Needs a launch or resume.
    Idle,
    /// Terminal, past the horizon, corrupt or faulted.
    Finished,
}

pub struct RunSlot {
    pub record: RunRecord,
    driver: Option<Driver<BoxAdapter>>,
    /// Replayed state when there is no driver.
    snapshot: Option<Run>,
    /// Log lines when there is no driver.
    lines: Vec<String>,
    persisted: usize,
    pub corrupt: Option<String>,
    pub fault: Option<String>,
    pub last_error: Option<String>,
    pub recovery: Option<Recovery>,
    denials: BTreeMap<String, u64>,
    pace: Option<(Instant, Timestamp)>,
    report: Option<(usize, Result<BiasReport, String>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeProgress {
    pub node_id: String,
    pub group_id: String,
    pub stage: usize,
    pub status: NodeStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub units_total: usize,
    pub units_judged: usize,
    pub judgments: u64,
    pub judgments_target: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuotaGauge {
    pub attribute: String,
    pub cap_fraction: f64,
    pub target_total: u64,
    pub cap: u64,
    pub values: BTreeMap<String, QuotaCounts>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStatus {
    pub run_id: String,
    pub workflow_id: String,
    pub adapter: String,
    pub seed: u64,
    pub state: RunState,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cause: Option<Cause>,
    pub clock: Timestamp,
    pub head_seq: u64,
    pub state_hash: String,
    pub current_stage: usize,
    pub nodes: Vec<NodeProgress>,
    pub judgments: u64,
    pub judgments_target: u64,
    pub denials: BTreeMap<String, u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quota: Option<QuotaGauge>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrupt: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub last_error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recovery: Option<Recovery>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventPage {
    pub events: Vec<Value>,
    pub head_seq: u64,
    /// Pass as `since_seq` on the next poll.
    pub next_since_seq: u64,
    /// Suggested wait before polling again when the page is empty.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retry_after_ms: Option<u64>,
}

/// Opaque stand-in for a raw fingerprint.
pub fn fingerprint_hash(fp: &str) -> String {
    hex::encode(&Sha256::digest(fp.as_bytes())[..12])
}

/// A log line as served by the API: the raw fingerprint replaced by its hash.
pub fn public_event(line: &str) -> Value {
    let mut v: Value = serde_json::from_str(line).expect("persisted lines are JSON");
    if let Some(p) = v.get_mut("payload").and_then(Value::as_object_mut) {
        if let Some(Value::String(fp)) = p.remove("fingerprint") {
            p.insert("fingerprint_hash".into(), Value::String(fingerprint_hash(&fp)));
        }
    }
    v
}

fn denial_reason(line: &str) -> Option<String> {
    if !line.contains("\"kind\":\"DENIED\"") {
        return None;
    }
    let v: Value = serde_json::from_str(line).ok()?;
    v["payload"]["reason"].as_str().map(str::to_string)
}

fn events_of(lines: &[String]) -> Vec<RunEvent> {
    lines
        .iter()
        .map(|l| serde_json::from_str(l).expect("persisted lines decode"))
        .collect()
}

/// Re-executes a simulated run until its log matches `events`. Manual
/// lifecycle actions are re-applied at their logged times; everything else
/// comes out of the seeded simulator. Returns the driver and the number of
/// events reproduced, which falls short of `events.len()` only when the
/// persisted log ends in the middle of a step.
fn regenerate(
    adapter: BoxAdapter,
    events: &[RunEvent],
    lines: &[String],
    mut fresh: impl FnMut() -> BoxAdapter,
) -> Result<(Driver<BoxAdapter>, usize), String> {
    let deployed = &events[0];
    let EventBody::Deployed(config) = &deployed.body else {
        return Err("log does not start with DEPLOYED".into());
    };
    let mut d = Driver::deploy((**config).clone(), adapter, deployed.time).map_err(|e| e.to_string())?;
    let mut boundary = d.log.len();
    while d.log.len() < events.len() {
        let next = &events[d.log.len()];
        let before = d.log.len();
        match &next.body {
            EventBody::Lifecycle {
                action,
                cause: Cause::Manual,
                ..
            } => {
                d.now = d.now.max(next.time);
                d.act(*action).map_err(|e| e.to_string())?;
            }
            _ => {
                if !d.step(next.time.max(d.now)).map_err(|e| e.to_string())? {
                    return Err(format!("diverged: nothing reproduces seq {}", next.seq));
                }
            }
        }
        if d.log.len() > before && d.log.len() <= events.len() {
            boundary = d.log.len();
        }
    }
    let n = events.len().min(d.log.len());
    if let Some(i) = (0..n).find(|&i| d.log.lines()[i] != lines[i]) {
        return Err(format!("diverged at seq {}", i + 1));
    }
    if d.log.len() > events.len() {
        let (d, _) = regenerate(fresh(), &events[..boundary], &lines[..boundary], fresh)?;
        return Ok((d, boundary));
    }
    Ok((d, events.len()))
}

impl RunSlot {
    pub fn deploy(store: &Store, record: RunRecord, adapter: BoxAdapter, config: crowdflow_core::orchestrator::RunConfig) -> Result<Self, ServiceError> {
        let driver = Driver::deploy(config, adapter, record.start).map_err(deploy_error)?;
        store.create_run(&record)?;
        let mut slot = Self::with_driver(record, driver);
        slot.persist(store)?;
        Ok(slot)
    }

    fn with_driver(record: RunRecord, driver: Driver<BoxAdapter>) -> Self {
        Self {
            record,
            driver: Some(driver),
            snapshot: None,
            lines: Vec::new(),
            persisted: 0,
            corrupt: None,
            fault: None,
            last_error: None,
            recovery: None,
            denials: BTreeMap::new(),
            pace: None,
            report: None,
        }
    }

    fn frozen(record: RunRecord, snapshot: Option<Run>, lines: Vec<String>, corrupt: Option<String>) -> Self {
        let mut s = Self {
            record,
            driver: None,
            snapshot,
            persisted: lines.len(),
            lines,
            corrupt,
            fault: None,
            last_error: None,
            recovery: None,
            denials: BTreeMap::new(),
            pace: None,
            report: None,
        };
        s.count_denials(0);
        s
    }

    /// Rebuilds a run from disk: drops a torn tail, verifies the chain,
    /// replays the valid prefix and, for live runs, reattaches an adapter.
    pub fn recover(store: &Store, record: RunRecord, adapters: &Adapters) -> Result<Self, ServiceError> {
        let id = record.run_id.clone();
        let text = store.read_log(&id)?;
        let mut head = String::new();
        let mut events = Vec::new();
        let mut lines = Vec::new();
        let mut corrupt = None;
        for (i, line) in text.text.lines().enumerate() {
            match decode_line(i + 1, &head, events.len() as u64 + 1, line) {
                Ok((ev, h)) => {
                    head = h;
                    events.push(ev);
                    lines.push(line.to_string());
                }
                Err(e) => {
                    corrupt = Some(e.to_string());
                    break;
                }
            }
        }
        if events.is_empty() && corrupt.is_none() {
            corrupt = Some("log is empty".into());
        }
        let snapshot = match replay(&events) {
            Ok(run) => Some(run),
            Err(e) => {
                corrupt.get_or_insert_with(|| e.to_string());
                None
            }
        };
        let recovery = |events: usize, dropped_events: usize, run: &Run| Recovery {
            events,
            torn_bytes: text.torn_bytes,
            dropped_events,
            state_hash: run.state_hash(),
        };
        let Some(run) = snapshot.filter(|_| corrupt.is_none()) else {
            let snapshot = if events.is_empty() { None } else { replay(&events).ok() };
            return Ok(Self::frozen(record, snapshot, lines, corrupt));
        };
        if run.state().is_terminal() {
            let rec = recovery(events.len(), 0, &run);
            let mut s = Self::frozen(record, Some(run), lines, None);
            s.recovery = Some(rec);
            return Ok(s);
        }
        let adapter = adapters.make(&record)?;
        if Adapters::is_sim(&record.adapter) {
            let fresh = || adapters.make(&record).expect("adapter was constructible");
            match regenerate(adapter, &events, &lines, fresh) {
                Ok((driver, kept)) => {
                    if kept < lines.len() {
                        let len: usize = lines[..kept].iter().map(|l| l.len() + 1).sum();
                        store.truncate_log(&id, len as u64)?;
                    }
                    let rec = recovery(kept, lines.len() - kept, &driver.run);
                    let mut s = Self::with_driver(record, driver);
                    s.persisted = kept;
                    s.count_denials(0);
                    s.recovery = Some(rec);
                    Ok(s)
                }
                Err(reason) => Ok(Self::frozen(record, Some(run), lines, Some(reason))),
            }
        } else {
            let mut log = EventLog::new();
            for ev in &events {
                log.append(ev);
            }
            let rec = recovery(events.len(), 0, &run);
            let mut driver = Driver::resume(run, log, adapter);
            driver.now = driver.now.max(crate::store::now());
            let mut s = Self::with_driver(record, driver);
            s.persisted = events.len();
            s.count_denials(0);
            s.recovery = Some(rec);
            Ok(s)
        }
    }

    pub fn lines(&self) -> &[String] {
        match &self.driver {
            Some(d) => d.log.lines(),
            None => &self.lines,
        }
    }

    pub fn run(&self) -> Option<&Run> {
        self.driver.as_ref().map(|d| &d.run).or(self.snapshot.as_ref())
    }

    pub fn state(&self) -> Option<RunState> {
        self.run().map(Run::state)
    }

    fn count_denials(&mut self, from: usize) {
        let reasons: Vec<String> = self.lines()[from..].iter().filter_map(|l| denial_reason(l)).collect();
        for r in reasons {
            *self.denials.entry(r).or_default() += 1;
        }
    }

    /// Appends and syncs the lines written since the last call.
    pub fn persist(&mut self, store: &Store) -> Result<(), ServiceError> {
        let from = self.persisted;
        let total = self.lines().len();
        if total == from {
            return Ok(());
        }
        store.append_lines(&self.record.run_id, &self.lines()[from..])?;
        self.persisted = total;
        self.count_denials(from);
        Ok(())
    }

    fn refuse_if_corrupt(&self) -> Result<(), ServiceError> {
        match &self.corrupt {
            Some(reason) => Err(ServiceError::Corrupt {
                run: self.record.run_id.clone(),
                reason: reason.clone(),
            }),
            None => Ok(()),
        }
    }

    pub fn act(&mut self, store: &Store, action: Action) -> Result<(), ServiceError> {
        self.refuse_if_corrupt()?;
        let Some(d) = self.driver.as_mut() else {
            let mut run = self.snapshot.clone().expect("healthy runs have state");
            let at = run.last_time;
            return match run.act(action, at) {
                Err(e) => Err(ServiceError::Conflict(e.to_string())),
                Ok(_) => Err(ServiceError::Conflict(format!("run is {}", run.state()))),
            };
        };
        match d.act(action) {
            Ok(_) => {}
            Err(OrchestratorError::Transition(e)) => return Err(ServiceError::Conflict(e.to_string())),
            Err(e) => return Err(ServiceError::Unprocessable(e.to_string())),
        }
        self.pace = None;
        self.persist(store)
    }

    fn horizon(&self) -> Timestamp {
        self.record.start + Duration::hours(self.record.horizon_hours as i64)
    }

    /// Drives the run by up to `budget` steps. Pacing only applies when
    /// `paced` is set.
    pub fn advance(&mut self, store: &Store, budget: usize, paced: bool) -> Result<Progress, ServiceError> {
        if self.corrupt.is_some() || self.fault.is_some() {
            return Ok(Progress::Finished);
        }
        let sim = Adapters::is_sim(&self.record.adapter);
        let horizon = self.horizon();
        let speed = self.record.speed;
        let Some(d) = self.driver.as_mut() else {
            return Ok(Progress::Finished);
        };
        match d.run.state() {
            s if s.is_terminal() => return Ok(Progress::Finished),
            RunState::Draft | RunState::Deployed => return Ok(Progress::Idle),
            RunState::Paused if d.run.lifecycle.last_cause() == Some(Cause::Manual) => return Ok(Progress::Idle),
            _ => {}
        }
        let target = if sim {
            if d.now >= horizon {
                return Ok(Progress::Finished);
            }
            match (paced, speed) {
                (true, Some(speed)) => {
                    let (wall, virt) = *self.pace.get_or_insert((Instant::now(), d.now));
                    let ms = (wall.elapsed().as_secs_f64() * speed * 1000.0) as i64;
                    (virt + Duration::milliseconds(ms)).min(horizon)
                }
                _ => horizon,
            }
        } else {
            crate::store::now()
        };
        let mut steps = 0;
        let mut outcome = Ok(());
        while steps < budget {
            match d.step(target) {
                Ok(true) => steps += 1,
                Ok(false) => break,
                Err(e) => {
                    outcome = Err(e);
                    break;
                }
            }
        }
        match outcome {
            Ok(()) => self.last_error = None,
            Err(OrchestratorError::Adapter(e @ AdapterError::Transport { .. })) => {
                self.last_error = Some(e.to_string());
            }
            Err(e) => {
                let message = format!("run faulted: {e}");
                let _ = d.fail(&message);
                self.fault = Some(message);
            }
        }
        self.persist(store)?;
        self.report = None;
        Ok(if self.fault.is_some() {
            Progress::Finished
        } else if steps > 0 {
            Progress::Advanced
        } else {
            Progress::Waiting
        })
    }

    pub fn status(&self) -> RunStatus {
        let run = self.run();
        let clock = match (&self.driver, run) {
            (Some(d), _) => d.now,
            (None, Some(r)) => r.last_time,
            (None, None) => self.record.start,
        };
        let mut nodes = Vec::new();
        let (mut judgments, mut target) = (0, 0);
        if let Some(run) = run {
            for n in run.nodes.values() {
                let (judged, total) = n.progress();
                judgments += judged;
                target += total;
                nodes.push(NodeProgress {
                    node_id: n.node_id.clone(),
                    group_id: n.group_id.clone(),
                    stage: n.stage,
                    status: n.status(),
                    task: n.task.clone(),
                    units_total: n.units.len(),
                    units_judged: n.units.iter().filter(|u| u.count() >= n.k as usize).count(),
                    judgments: judged,
                    judgments_target: total,
                });
            }
            nodes.sort_by(|a, b| (a.stage, &a.node_id).cmp(&(b.stage, &b.node_id)));
        }
        RunStatus {
            run_id: self.record.run_id.clone(),
            workflow_id: self.record.workflow_id.clone(),
            adapter: self.record.adapter.clone(),
            seed: self.record.seed,
            state: run.map_or(RunState::Draft, Run::state),
            cause: run.and_then(|r| r.lifecycle.last_cause()),
            clock,
            head_seq: self.lines().len() as u64,
            state_hash: run.map(Run::state_hash).unwrap_or_default(),
            current_stage: run.map_or(0, |r| r.current_stage),
            nodes,
            judgments,
            judgments_target: target,
            denials: self.denials.clone(),
            quota: run.and_then(|r| r.quota.as_ref()).map(|q| QuotaGauge {
                attribute: q.spec().attribute.clone(),
                cap_fraction: q.spec().cap_fraction,
                target_total: q.target_total(),
                cap: q.cap(),
                values: q.all_counts().clone(),
            }),
            corrupt: self.corrupt.clone(),
            fault: self.fault.clone(),
            last_error: self.last_error.clone(),
            recovery: self.recovery.clone(),
        }
    }

    pub fn page(&self, since_seq: u64, limit: usize) -> EventPage {
        let lines = self.lines();
        let head = lines.len() as u64;
        let from = since_seq.min(head) as usize;
        let events: Vec<Value> = lines[from..].iter().take(limit).map(|l| public_event(l)).collect();
        let next = from as u64 + events.len() as u64;
        EventPage {
            retry_after_ms: events.is_empty().then_some(2000),
            events,
            head_seq: head,
            next_since_seq: next.max(since_seq.min(head)),
        }
    }

    pub fn events(&self) -> Vec<RunEvent> {
        events_of(self.lines())
    }

    pub fn report(&mut self) -> Result<BiasReport, ServiceError> {
        let n = self.lines().len();
        if self.report.as_ref().is_none_or(|(m, _)| *m != n) {
            let r = analytics::report(&[self.events()]).map_err(|e| match e {
                AnalyticsError::EmptyLog => "EMPTY".to_string(),
                e => e.to_string(),
            });
            self.report = Some((n, r));
        }
        match &self.report.as_ref().expect("just filled").1 {
            Ok(r) => Ok(r.clone()),
            Err(e) if e == "EMPTY" => Err(ServiceError::NoJudgments),
            Err(e) => Err(ServiceError::Unprocessable(e.clone())),
        }
    }
}

fn deploy_error(e: OrchestratorError) -> ServiceError {
    match e {
        OrchestratorError::Invalid(v) => ServiceError::Invalid(v),
        OrchestratorError::Adapter(a) => ServiceError::Adapter(a.to_string()),
        e => ServiceError::Unprocessable(e.to_string()),
    }
}
