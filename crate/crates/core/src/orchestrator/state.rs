//! Run state and the event fold that builds it.

use std::collections::{BTreeMap, BTreeSet};

use chrono::Duration;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::events::{EventBody, RunConfig, RunEvent};
use crate::canonical::canonical_compact;
use crate::eligibility::{ParticipationLedger, WorkerId, WorkerRegistry};
use crate::population::{Admission, QuotaLedger, DEFAULT_TTL_MINUTES};
use crate::scheduler::{Action, Cause, RunLifecycle, RunState};
use crate::workflow::{
    apply_lambda, topological_stages, Collection, DataUnit, Endpoint, Hop, Item, LambdaError, LambdaSpec, Vote,
    Workflow, MAJORITY_FIELD, UNRESOLVED,
};
use crate::Timestamp;

/// Ledger scope for participation entries. A run's ledger only ever holds
/// its own history, so a fixed scope keeps logs independent of run ids.
pub const RUN_SCOPE: &str = "run";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitState {
    pub unit: DataUnit,
    pub judgments: Vec<Vote>,
    pub inflight: BTreeSet<WorkerId>,
}

impl UnitState {
    pub fn count(&self) -> usize {
        self.judgments.len()
    }

    pub fn touched_by(&self, worker: &str) -> bool {
        self.inflight.contains(worker) || self.judgments.iter().any(|v| v.worker == worker)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeStatus {
    Pending,
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub node_id: String,
    pub group_id: String,
    pub k: u32,
    pub stage: usize,
    pub installed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<String>,
    pub launched: bool,
    pub units: Vec<UnitState>,
}

impl NodeState {
    pub fn status(&self) -> NodeStatus {
        if !self.installed {
            NodeStatus::Pending
        } else if self.units.iter().all(|u| u.count() >= self.k as usize) {
            NodeStatus::Closed
        } else {
            NodeStatus::Open
        }
    }

    pub fn unit(&self, unit_id: &str) -> Option<&UnitState> {
        self.units.iter().find(|u| u.unit.unit_id == unit_id)
    }

    fn unit_mut(&mut self, unit_id: &str) -> Option<&mut UnitState> {
        self.units.iter_mut().find(|u| u.unit.unit_id == unit_id)
    }

    /// `(judged, total)` where `judged` counts committed judgments capped at
    /// k per unit and `total` is `k * units`.
    pub fn progress(&self) -> (u64, u64) {
        let k = u64::from(self.k);
        let judged = self.units.iter().map(|u| (u.count() as u64).min(k)).sum();
        (judged, k * self.units.len() as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveAssignment {
    pub unit_id: String,
    pub assigned_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reservation: Option<String>,
}

/// An admitted worker on a node. Keyed by platform worker id because that is
/// how the adapter addresses the worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub worker: WorkerId,
    pub country: String,
    pub started_at: Timestamp,
    /// Quota slot reserved at admission, not yet tied to a unit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub held: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub active: Option<ActiveAssignment>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReplayError {
    #[error("log is empty")]
    Empty,
    #[error("first event must be DEPLOYED")]
    NotDeployed,
    #[error("seq {found} does not follow {last}")]
    Seq { last: u64, found: u64 },
    #[error("event {seq} goes back in time")]
    TimeTravel { seq: u64 },
    #[error("event {seq} does not match the run state: {message}")]
    Divergence { seq: u64, message: String },
    #[error(transparent)]
    Log(#[from] super::events::LogError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Run {
    pub config: RunConfig,
    pub lifecycle: RunLifecycle,
    pub stages: Vec<Vec<String>>,
    pub current_stage: usize,
    pub nodes: BTreeMap<String, NodeState>,
    pub task_refs: BTreeMap<String, String>,
    pub registry: WorkerRegistry,
    pub ledger: ParticipationLedger,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quota: Option<QuotaLedger>,
    /// node id -> platform worker id -> session
    pub sessions: BTreeMap<String, BTreeMap<String, Session>>,
    pub target_total: u64,
    pub sink: Vec<Item>,
    pub unresolved_units: u64,
    pub cross_group_merges: u64,
    pub seq: u64,
    pub last_time: Timestamp,
}

/// Summary of one edge evaluation, logged as LAMBDA_APPLIED.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct EdgeFlow {
    pub from: String,
    pub to: String,
    pub lambda: &'static str,
    pub units_in: usize,
    pub units_out: usize,
    pub unresolved: u64,
    pub cross_group: bool,
}

impl EdgeFlow {
    pub fn to_body(&self) -> EventBody {
        EventBody::LambdaApplied {
            from: self.from.clone(),
            to: self.to.clone(),
            lambda: self.lambda.to_string(),
            units_in: self.units_in,
            units_out: self.units_out,
            unresolved: self.unresolved,
            cross_group: self.cross_group,
        }
    }
}

/// Evaluates the in-edges of `target`. `output` yields the collection a
/// node emits. Items arrive deduplicated by unit id (first occurrence wins)
/// with the traversed hop appended to their provenance.
pub(crate) fn route(
    workflow: &Workflow,
    target: &Endpoint,
    output: &dyn Fn(&str) -> Collection,
) -> Result<(Vec<Item>, Vec<EdgeFlow>), LambdaError> {
    let in_edges: Vec<usize> = workflow.in_edges(target).collect();
    let source_groups: BTreeSet<&str> = in_edges
        .iter()
        .filter_map(|&i| workflow.edges[i].from.node())
        .filter_map(|n| workflow.node(n))
        .map(|n| n.group_id.as_str())
        .collect();
    let mut items: Vec<Item> = Vec::new();
    let mut seen = BTreeSet::new();
    let mut flows = Vec::new();
    for idx in in_edges {
        let edge = &workflow.edges[idx];
        let input = match &edge.from {
            Endpoint::Source => Collection::new(
                crate::workflow::SOURCE,
                workflow.input_units.iter().cloned().map(Item::new).collect(),
            ),
            Endpoint::Node(n) => output(n),
            Endpoint::Sink => unreachable!("validated workflows have no edges out of the sink"),
        };
        let units_in = input.items.len();
        let outs = apply_lambda(&edge.lambda, std::slice::from_ref(&input))?;
        let chosen = if edge.lambda.is_fan_out() {
            let group = workflow.fan_out_group(idx);
            let pos = group.iter().position(|&g| g == idx).expect("edge is in its own group");
            outs.into_iter().nth(pos).map(|c| c.items).unwrap_or_default()
        } else {
            outs.into_iter().next().map(|c| c.items).unwrap_or_default()
        };
        let unresolved = if edge.lambda == LambdaSpec::MajorityVote {
            chosen
                .iter()
                .filter(|i| {
                    i.unit
                        .payload
                        .get(MAJORITY_FIELD)
                        .is_some_and(|v| v.key_string() == UNRESOLVED)
                })
                .count() as u64
        } else {
            0
        };
        flows.push(EdgeFlow {
            from: edge.from.as_str().to_string(),
            to: target.as_str().to_string(),
            lambda: edge.lambda.name(),
            units_in,
            units_out: chosen.len(),
            unresolved,
            cross_group: edge.lambda == LambdaSpec::Union
                && matches!(target, Endpoint::Node(_))
                && source_groups.len() > 1,
        });
        for mut item in chosen {
            if seen.insert(item.unit.unit_id.clone()) {
                item.unit
                    .provenance
                    .push(Hop(edge.from.as_str().to_string(), edge.lambda.name().to_string()));
                items.push(item);
            }
        }
    }
    Ok((items, flows))
}

/// Number of judgments a run will need if every node receives what a
/// judgment-free dry run of the routing delivers. Exact unless a filter or
/// partition keys on aggregated answers.
pub fn planned_judgments(workflow: &Workflow) -> Result<u64, LambdaError> {
    let stages = topological_stages(workflow).map_err(|e| LambdaError::InvalidParams {
        lambda: "workflow",
        message: e.to_string(),
    })?;
    let mut outputs: BTreeMap<String, Vec<Item>> = BTreeMap::new();
    let mut total = 0u64;
    for stage in stages {
        for node_id in stage {
            let (items, _) = route(workflow, &Endpoint::Node(node_id.clone()), &|n| {
                Collection::new(n, outputs.get(n).cloned().unwrap_or_default())
            })?;
            let k = workflow.node(&node_id).map_or(0, |n| n.judgments_per_unit);
            total += u64::from(k) * items.len() as u64;
            let stripped = items
                .into_iter()
                .map(|mut i| {
                    i.judgments.clear();
                    i
                })
                .collect();
            outputs.insert(node_id, stripped);
        }
    }
    Ok(total)
}

fn divergence(seq: u64, message: impl Into<String>) -> ReplayError {
    ReplayError::Divergence {
        seq,
        message: message.into(),
    }
}

impl Run {
    /// Builds the initial state from a DEPLOYED event.
    pub fn from_deployed(event: &RunEvent) -> Result<Self, ReplayError> {
        let EventBody::Deployed(config) = &event.body else {
            return Err(ReplayError::NotDeployed);
        };
        if event.seq != 1 {
            return Err(ReplayError::Seq {
                last: 0,
                found: event.seq,
            });
        }
        let config = (**config).clone();
        let stages: Vec<Vec<String>> = topological_stages(&config.workflow)
            .map_err(|e| divergence(1, e.to_string()))?
            .into_iter()
            .map(|s| s.into_iter().collect())
            .collect();
        let target_total = planned_judgments(&config.workflow).map_err(|e| divergence(1, e.to_string()))?;
        let quota = match &config.quota {
            Some(spec) => Some(QuotaLedger::new(spec.clone(), target_total).map_err(|e| divergence(1, e.to_string()))?),
            None => None,
        };
        let mut nodes = BTreeMap::new();
        for (i, stage) in stages.iter().enumerate() {
            for id in stage {
                let n = config.workflow.node(id).expect("staged nodes exist");
                nodes.insert(
                    id.clone(),
                    NodeState {
                        node_id: id.clone(),
                        group_id: n.group_id.clone(),
                        k: n.judgments_per_unit,
                        stage: i,
                        installed: false,
                        task: None,
                        launched: false,
                        units: Vec::new(),
                    },
                );
            }
        }
        let lifecycle = RunLifecycle::new()
            .transition(Action::Deploy, Cause::Manual, event.time)
            .map_err(|e| divergence(1, e.to_string()))?;
        Ok(Self {
            config,
            lifecycle,
            stages,
            current_stage: 0,
            nodes,
            task_refs: BTreeMap::new(),
            registry: WorkerRegistry::new(),
            ledger: ParticipationLedger::new(),
            quota,
            sessions: BTreeMap::new(),
            target_total,
            sink: Vec::new(),
            unresolved_units: 0,
            cross_group_merges: 0,
            seq: 1,
            last_time: event.time,
        })
    }

    pub fn state(&self) -> RunState {
        self.lifecycle.state
    }

    pub fn workflow(&self) -> &Workflow {
        &self.config.workflow
    }

    pub fn ttl(&self) -> Duration {
        let minutes = self
            .config
            .quota
            .as_ref()
            .map_or(DEFAULT_TTL_MINUTES, |q| q.ttl_minutes);
        Duration::minutes(i64::from(minutes))
    }

    pub fn session(&self, node_id: &str, platform_worker: &str) -> Option<&Session> {
        self.sessions.get(node_id).and_then(|m| m.get(platform_worker))
    }

    pub(crate) fn node_output(&self, node_id: &str) -> Collection {
        let items = self.nodes.get(node_id).map_or_else(Vec::new, |n| {
            n.units
                .iter()
                .map(|u| Item {
                    unit: u.unit.clone(),
                    judgments: u.judgments.clone(),
                })
                .collect()
        });
        Collection::new(node_id, items)
    }

    pub(crate) fn route_into(&self, target: &Endpoint) -> Result<(Vec<Item>, Vec<EdgeFlow>), LambdaError> {
        route(&self.config.workflow, target, &|n| self.node_output(n))
    }

    /// True when every node of the last stage is closed.
    pub fn data_complete(&self) -> bool {
        self.current_stage + 1 >= self.stages.len()
            && self.stages[self.current_stage]
                .iter()
                .all(|n| self.nodes[n].status() == NodeStatus::Closed)
    }

    /// Earliest instant at which some in-flight assignment times out.
    pub fn next_expiry(&self) -> Option<Timestamp> {
        let ttl = self.ttl();
        self.sessions
            .values()
            .flat_map(|m| m.values())
            .filter_map(|s| s.active.as_ref())
            .map(|a| a.assigned_at + ttl)
            .min()
    }

    /// Digest of the canonical serialized state.
    pub fn state_hash(&self) -> String {
        let v = serde_json::to_value(self).expect("run state serializes");
        hex::encode(Sha256::digest(canonical_compact(&v).as_bytes()))
    }

    fn clear_active(&mut self, node_id: &str, platform_worker: &str, seq: u64) -> Result<(), ReplayError> {
        let Some(session) = self.sessions.get_mut(node_id).and_then(|m| m.get_mut(platform_worker)) else {
            return Ok(());
        };
        let held = session.held.take();
        let active = session.active.take();
        let worker = session.worker.clone();
        if let (Some(q), Some(id)) = (self.quota.as_mut(), &held) {
            q.release(id).map_err(|e| divergence(seq, e.to_string()))?;
        }
        let Some(active) = active else {
            return Ok(());
        };
        if let Some(id) = &active.reservation {
            if let Some(q) = self.quota.as_mut() {
                q.release(id).map_err(|e| divergence(seq, e.to_string()))?;
            }
        }
        if let Some(u) = self.nodes.get_mut(node_id).and_then(|n| n.unit_mut(&active.unit_id)) {
            u.inflight.remove(&worker);
        }
        Ok(())
    }

    fn end_session(&mut self, node_id: &str, platform_worker: &str, seq: u64) -> Result<(), ReplayError> {
        self.clear_active(node_id, platform_worker, seq)?;
        if let Some(m) = self.sessions.get_mut(node_id) {
            m.remove(platform_worker);
            if m.is_empty() {
                self.sessions.remove(node_id);
            }
        }
        Ok(())
    }

    fn transition(&mut self, action: Action, cause: Cause, at: Timestamp, seq: u64) -> Result<(), ReplayError> {
        self.lifecycle = self
            .lifecycle
            .transition(action, cause, at)
            .map_err(|e| divergence(seq, e.to_string()))?;
        Ok(())
    }

    fn install_stage(&mut self, stage: usize, seq: u64) -> Result<(), ReplayError> {
        let ids = self
            .stages
            .get(stage)
            .cloned()
            .ok_or_else(|| divergence(seq, format!("no stage {stage}")))?;
        let mut installs = Vec::new();
        for id in &ids {
            let (items, _) = self
                .route_into(&Endpoint::Node(id.clone()))
                .map_err(|e| divergence(seq, e.to_string()))?;
            installs.push((id.clone(), items));
        }
        for (id, items) in installs {
            let node = self.nodes.get_mut(&id).expect("staged node");
            node.installed = true;
            node.units = items
                .into_iter()
                .map(|i| UnitState {
                    unit: i.unit,
                    judgments: Vec::new(),
                    inflight: BTreeSet::new(),
                })
                .collect();
        }
        self.current_stage = stage;
        Ok(())
    }

    /// Folds one event into the state.
    pub fn apply(&mut self, event: &RunEvent) -> Result<(), ReplayError> {
        let seq = event.seq;
        if seq != self.seq + 1 {
            return Err(ReplayError::Seq {
                last: self.seq,
                found: seq,
            });
        }
        if event.time < self.last_time {
            return Err(ReplayError::TimeTravel { seq });
        }
        let t = event.time;
        match &event.body {
            EventBody::Deployed(_) => return Err(divergence(seq, "run already deployed")),
            EventBody::Lifecycle { action, state, cause } => {
                self.transition(*action, *cause, t, seq)?;
                if self.lifecycle.state != *state {
                    return Err(divergence(seq, "lifecycle state mismatch"));
                }
                if *state == RunState::Running {
                    for n in self.nodes.values_mut() {
                        if n.task.is_some() && n.status() == NodeStatus::Open {
                            n.launched = true;
                        }
                    }
                }
            }
            EventBody::TaskCreated { node_id, task } => {
                let running = self.state() == RunState::Running;
                let node = self
                    .nodes
                    .get_mut(node_id)
                    .ok_or_else(|| divergence(seq, format!("unknown node {node_id}")))?;
                node.task = Some(task.clone());
                node.launched = running;
                self.task_refs.insert(task.clone(), node_id.clone());
            }
            EventBody::WorkerArrival {
                node_id,
                platform_worker,
                fingerprint,
                country,
                trust,
                worker,
                continuation,
                ..
            } => {
                let r = self.registry.resolve(
                    &self.config.adapter,
                    platform_worker,
                    fingerprint.as_deref(),
                    country,
                    *trust,
                    t,
                );
                if &r.canonical_id != worker {
                    return Err(divergence(seq, "worker resolution differs"));
                }
                if *continuation != self.session(node_id, platform_worker).is_some() {
                    return Err(divergence(seq, "session state differs"));
                }
            }
            EventBody::WorkerMerged { absorbed, survivor } => {
                self.ledger.merge(absorbed, survivor);
                for m in self.sessions.values_mut() {
                    for s in m.values_mut() {
                        if &s.worker == absorbed {
                            s.worker = survivor.clone();
                        }
                    }
                }
                for n in self.nodes.values_mut() {
                    for u in &mut n.units {
                        if u.inflight.remove(absorbed) {
                            u.inflight.insert(survivor.clone());
                        }
                        for v in &mut u.judgments {
                            if &v.worker == absorbed {
                                v.worker = survivor.clone();
                            }
                        }
                    }
                }
            }
            EventBody::Admitted {
                worker,
                node_id,
                platform_worker,
                country,
                reservation,
                ..
            } => {
                let group = self
                    .nodes
                    .get(node_id)
                    .ok_or_else(|| divergence(seq, format!("unknown node {node_id}")))?
                    .group_id
                    .clone();
                let got = match self.quota.as_mut() {
                    Some(q) => match q.admit(country, t) {
                        Admission::Allow(id) => Some(id),
                        Admission::DenyQuota => return Err(divergence(seq, "quota refused a logged admission")),
                    },
                    None => None,
                };
                if &got != reservation {
                    return Err(divergence(seq, "reservation id differs"));
                }
                self.ledger.grant(worker, node_id, &group, RUN_SCOPE);
                let session = self
                    .sessions
                    .entry(node_id.clone())
                    .or_default()
                    .entry(platform_worker.clone())
                    .or_insert_with(|| Session {
                        worker: worker.clone(),
                        country: country.clone(),
                        started_at: t,
                        held: None,
                        active: None,
                    });
                if session.held.is_some() || session.active.is_some() {
                    return Err(divergence(seq, "admission into a busy session"));
                }
                session.worker = worker.clone();
                session.country = country.clone();
                session.held = got;
            }
            EventBody::Denied {
                node_id,
                platform_worker,
                unit_id,
                ..
            } => {
                if let Some(unit_id) = unit_id {
                    let holds = self
                        .session(node_id, platform_worker)
                        .and_then(|s| s.active.as_ref())
                        .is_some_and(|a| &a.unit_id == unit_id);
                    if holds {
                        self.clear_active(node_id, platform_worker, seq)?;
                    }
                } else {
                    self.end_session(node_id, platform_worker, seq)?;
                }
            }
            EventBody::UnitAssigned {
                worker,
                node_id,
                platform_worker,
                unit_id,
            } => {
                let session = self
                    .sessions
                    .get_mut(node_id)
                    .and_then(|m| m.get_mut(platform_worker))
                    .ok_or_else(|| divergence(seq, "assignment without admission"))?;
                let reservation = session.held.take();
                session.active = Some(ActiveAssignment {
                    unit_id: unit_id.clone(),
                    assigned_at: t,
                    reservation,
                });
                let unit = self
                    .nodes
                    .get_mut(node_id)
                    .and_then(|n| n.unit_mut(unit_id))
                    .ok_or_else(|| divergence(seq, format!("unknown unit {unit_id}")))?;
                unit.inflight.insert(worker.clone());
            }
            EventBody::Judgment {
                worker,
                node_id,
                group_id,
                unit_id,
                platform_worker,
                answer,
                ..
            } => {
                let active = self
                    .session(node_id, platform_worker)
                    .and_then(|s| s.active.clone())
                    .filter(|a| &a.unit_id == unit_id)
                    .ok_or_else(|| divergence(seq, "judgment without an assignment"))?;
                if let (Some(q), Some(id)) = (self.quota.as_mut(), &active.reservation) {
                    q.commit(id, t).map_err(|e| divergence(seq, e.to_string()))?;
                }
                self.ledger
                    .record_participation(worker, node_id, group_id, RUN_SCOPE, t)
                    .map_err(|e| divergence(seq, e.to_string()))?;
                let session = self
                    .sessions
                    .get_mut(node_id)
                    .and_then(|m| m.get_mut(platform_worker))
                    .expect("checked above");
                session.active = None;
                let unit = self
                    .nodes
                    .get_mut(node_id)
                    .and_then(|n| n.unit_mut(unit_id))
                    .ok_or_else(|| divergence(seq, format!("unknown unit {unit_id}")))?;
                unit.inflight.remove(worker);
                unit.judgments.push(Vote {
                    worker: worker.clone(),
                    answer: answer.clone(),
                });
            }
            EventBody::ReservationExpired {
                node_id,
                platform_worker,
                ..
            } => self.end_session(node_id, platform_worker, seq)?,
            EventBody::SessionEnded {
                node_id,
                platform_worker,
                ..
            } => self.end_session(node_id, platform_worker, seq)?,
            EventBody::LambdaApplied {
                unresolved,
                cross_group,
                ..
            } => {
                self.unresolved_units += unresolved;
                self.cross_group_merges += u64::from(*cross_group);
            }
            EventBody::StageAdvanced { stage, .. } => self.install_stage(*stage, seq)?,
            EventBody::RunCompleted { .. } => {
                let (items, _) = self
                    .route_into(&Endpoint::Sink)
                    .map_err(|e| divergence(seq, e.to_string()))?;
                self.sink = items;
            }
            EventBody::Warning { .. } => {}
        }
        self.seq = seq;
        self.last_time = t;
        Ok(())
    }
}
