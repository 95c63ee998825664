//! Turning inputs (adapter events, clock ticks, requester actions) into
//! logged run events and adapter commands.

use std::collections::BTreeSet;

use chrono::Duration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::events::{DenyReason, EventBody, RunConfig, RunEvent};
use super::state::{NodeState, NodeStatus, ReplayError, Run, RUN_SCOPE};
use super::OrchestratorError;
use crate::adapters::{AdapterCommand, AdapterEvent, AdapterEventKind};
use crate::eligibility::{decide, DecisionReason};
use crate::population::QuotaLedger;
use crate::scheduler::{Action, Cause, RunLifecycle, RunState, TransitionError};
use crate::workflow::{validate, Endpoint};
use crate::Timestamp;

/// Events logged and commands issued for one input.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Step {
    pub events: Vec<RunEvent>,
    pub commands: Vec<AdapterCommand>,
}

struct Out<'a> {
    run: &'a mut Run,
    time: Timestamp,
    step: Step,
}

impl Out<'_> {
    fn emit(&mut self, body: EventBody) -> Result<(), ReplayError> {
        let ev = RunEvent {
            seq: self.run.seq + 1,
            time: self.time,
            body,
        };
        self.run.apply(&ev)?;
        self.step.events.push(ev);
        Ok(())
    }

    fn command(&mut self, c: AdapterCommand) {
        self.step.commands.push(c);
    }
}

/// Picks the unit for an admitted worker: among units the worker has not
/// touched and that still need judgments (counting in-flight assignments),
/// the ones with the largest need, tie-broken uniformly by `rng`.
pub fn assign_unit(node: &NodeState, worker: &str, rng: &mut impl Rng) -> Option<String> {
    let k = node.k as usize;
    let needs: Vec<(usize, &str)> = node
        .units
        .iter()
        .filter(|u| !u.touched_by(worker))
        .filter_map(|u| {
            let need = k.saturating_sub(u.count() + u.inflight.len());
            (need > 0).then_some((need, u.unit.unit_id.as_str()))
        })
        .collect();
    let top = needs.iter().map(|(n, _)| *n).max()?;
    let tied: Vec<&str> = needs.iter().filter(|(n, _)| *n == top).map(|(_, id)| *id).collect();
    Some(tied[rng.random_range(0..tied.len())].to_string())
}

/// Assignment randomness is a pure function of the run seed and the
/// sequence number of the arrival being served.
pub fn assignment_rng(seed: u64, seq: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(seq);
    rng
}

/// Validates the configuration and builds the DEPLOYED run. The returned
/// commands create the platform tasks of stage 0.
pub fn deploy(config: RunConfig, at: Timestamp) -> Result<(Run, Step), OrchestratorError> {
    let violations = validate(&config.workflow);
    if !violations.is_empty() {
        return Err(OrchestratorError::Invalid(violations));
    }
    config.schedule.validate()?;
    if let Some(q) = &config.quota {
        if q.attribute != "country" {
            return Err(OrchestratorError::UnsupportedAttribute(q.attribute.clone()));
        }
        let target = super::state::planned_judgments(&config.workflow)?;
        QuotaLedger::new(q.clone(), target)?;
    }
    let first = RunEvent {
        seq: 1,
        time: at,
        body: EventBody::Deployed(Box::new(config)),
    };
    let mut run = Run::from_deployed(&first)?;
    let mut out = Out {
        run: &mut run,
        time: at,
        step: Step {
            events: vec![first],
            commands: Vec::new(),
        },
    };
    open_stage(&mut out, 0)?;
    advance(&mut out)?;
    let step = out.step;
    Ok((run, step))
}

fn open_stage(out: &mut Out, stage: usize) -> Result<(), OrchestratorError> {
    let ids = out.run.stages[stage].clone();
    let mut flows = Vec::new();
    for id in &ids {
        match out.run.route_into(&Endpoint::Node(id.clone())) {
            Ok((_, f)) => flows.extend(f),
            Err(e) => return fault(out, &e.to_string()),
        }
    }
    for f in flows {
        out.emit(f.to_body())?;
    }
    out.emit(EventBody::StageAdvanced {
        stage,
        nodes: ids.clone(),
    })?;
    for id in ids {
        let node = &out.run.nodes[&id];
        if node.units.is_empty() {
            continue;
        }
        let units = node.units.iter().map(|u| u.unit.clone()).collect();
        let spec = out.run.workflow().node(&id).expect("staged node").clone();
        out.command(AdapterCommand::CreateTask { node: spec, units });
    }
    Ok(())
}

fn fault(out: &mut Out, message: &str) -> Result<(), OrchestratorError> {
    out.emit(EventBody::Warning {
        message: format!("routing failed: {message}"),
    })?;
    abort(out, Cause::Fault)
}

fn abort(out: &mut Out, cause: Cause) -> Result<(), OrchestratorError> {
    let tasks: Vec<String> = out
        .run
        .nodes
        .values()
        .filter(|n| n.status() != NodeStatus::Closed)
        .filter_map(|n| n.task.clone())
        .collect();
    out.emit(EventBody::Lifecycle {
        action: Action::Abort,
        state: RunState::Aborted,
        cause,
    })?;
    for task in tasks {
        out.command(AdapterCommand::Cancel { task });
    }
    Ok(())
}

/// Opens following stages while the current one is closed, and completes the
/// run once the last stage is done and the run is RUNNING.
fn advance(out: &mut Out) -> Result<(), OrchestratorError> {
    loop {
        if out.run.state().is_terminal() {
            return Ok(());
        }
        let stage = out.run.current_stage;
        let closed = out.run.stages[stage]
            .iter()
            .all(|n| out.run.nodes[n].status() == NodeStatus::Closed);
        if !closed {
            return Ok(());
        }
        if stage + 1 < out.run.stages.len() {
            open_stage(out, stage + 1)?;
            continue;
        }
        if out.run.state() == RunState::Running {
            complete(out)?;
        }
        return Ok(());
    }
}

fn complete(out: &mut Out) -> Result<(), OrchestratorError> {
    let flows = match out.run.route_into(&Endpoint::Sink) {
        Ok((_, f)) => f,
        Err(e) => return fault(out, &e.to_string()),
    };
    for f in flows {
        out.emit(f.to_body())?;
    }
    out.emit(EventBody::Lifecycle {
        action: Action::DataComplete,
        state: RunState::Completed,
        cause: Cause::DataComplete,
    })?;
    let (items, _) = out.run.route_into(&Endpoint::Sink)?;
    out.emit(EventBody::RunCompleted {
        sink_units: items.len(),
        unresolved_units: out.run.unresolved_units,
    })?;
    Ok(())
}

/// Tasks that should receive PAUSE/RESUME/LAUNCH on a run-level transition.
fn live_tasks(run: &Run) -> Vec<(String, bool)> {
    run.nodes
        .values()
        .filter(|n| n.status() == NodeStatus::Open)
        .filter_map(|n| n.task.clone().map(|t| (t, n.launched)))
        .collect()
}

fn pause(out: &mut Out, cause: Cause) -> Result<(), OrchestratorError> {
    let tasks = live_tasks(out.run);
    out.emit(EventBody::Lifecycle {
        action: Action::Pause,
        state: RunState::Paused,
        cause,
    })?;
    for (task, launched) in tasks {
        if launched {
            out.command(AdapterCommand::Pause { task });
        }
    }
    Ok(())
}

/// Moves the run to RUNNING, then immediately back to PAUSED(SCHEDULE) if
/// the schedule is closed, or to COMPLETED if the data is already complete.
fn start(out: &mut Out, action: Action, cause: Cause) -> Result<(), OrchestratorError> {
    let tasks = live_tasks(out.run);
    out.emit(EventBody::Lifecycle {
        action,
        state: RunState::Running,
        cause,
    })?;
    for (task, launched) in tasks {
        out.command(if launched {
            AdapterCommand::Resume { task }
        } else {
            AdapterCommand::Launch { task }
        });
    }
    if !out.run.config.schedule.is_open(out.time) {
        pause(out, Cause::Schedule)
    } else if out.run.data_complete() {
        complete(out)
    } else {
        Ok(())
    }
}

impl Run {
    /// Applies a requester action at `at`.
    pub fn act(&mut self, action: Action, at: Timestamp) -> Result<Step, OrchestratorError> {
        let from = self.state();
        if !RunLifecycle::is_legal(from, action) || matches!(action, Action::Deploy | Action::DataComplete) {
            return Err(OrchestratorError::Transition(TransitionError::Illegal {
                from,
                to: match action {
                    Action::Deploy => RunState::Deployed,
                    Action::Launch | Action::Resume => RunState::Running,
                    Action::Pause => RunState::Paused,
                    Action::Abort => RunState::Aborted,
                    Action::DataComplete => RunState::Completed,
                },
                action,
            }));
        }
        let time = at.max(self.last_time);
        let mut out = Out {
            run: self,
            time,
            step: Step::default(),
        };
        match action {
            Action::Launch | Action::Resume => start(&mut out, action, Cause::Manual)?,
            Action::Pause => pause(&mut out, Cause::Manual)?,
            Action::Abort => abort(&mut out, Cause::Manual)?,
            Action::Deploy | Action::DataComplete => unreachable!("rejected above"),
        }
        Ok(out.step)
    }

    /// Logs a warning that does not change the run state.
    pub fn warn(&mut self, at: Timestamp, message: &str) -> Result<Step, OrchestratorError> {
        let time = at.max(self.last_time);
        let mut out = Out {
            run: self,
            time,
            step: Step::default(),
        };
        out.emit(EventBody::Warning {
            message: message.to_string(),
        })?;
        Ok(out.step)
    }

    /// Logs the failure and aborts the run with cause FAULT.
    pub fn fail(&mut self, at: Timestamp, message: &str) -> Result<Step, OrchestratorError> {
        let time = at.max(self.last_time);
        let mut out = Out {
            run: self,
            time,
            step: Step::default(),
        };
        out.emit(EventBody::Warning {
            message: message.to_string(),
        })?;
        if !out.run.state().is_terminal() {
            abort(&mut out, Cause::Fault)?;
        }
        Ok(out.step)
    }

    /// Processes one adapter event or clock tick.
    pub fn handle(&mut self, event: &AdapterEvent) -> Result<Step, OrchestratorError> {
        let time = event.time.max(self.last_time);
        let terminal = self.state().is_terminal();
        let mut out = Out {
            run: self,
            time,
            step: Step::default(),
        };
        if terminal {
            if !matches!(event.kind, AdapterEventKind::ClockTick) {
                let kind = serde_json::to_value(&event.kind)
                    .ok()
                    .and_then(|v| v["kind"].as_str().map(str::to_string))
                    .unwrap_or_default();
                out.emit(EventBody::Warning {
                    message: format!("ignored {kind} after the run ended"),
                })?;
            }
            return Ok(out.step);
        }
        match &event.kind {
            AdapterEventKind::TaskCreated { node_id, task } => {
                if !out.run.nodes.contains_key(node_id) {
                    return Err(OrchestratorError::UnknownNode(node_id.clone()));
                }
                out.emit(EventBody::TaskCreated {
                    node_id: node_id.clone(),
                    task: task.clone(),
                })?;
                if out.run.state() == RunState::Running {
                    out.command(AdapterCommand::Launch { task: task.clone() });
                }
            }
            AdapterEventKind::WorkerArrival {
                task,
                worker,
                fingerprint,
                country,
                trust,
            } => on_arrival(&mut out, task, worker, fingerprint.as_deref(), country, *trust)?,
            AdapterEventKind::JudgmentSubmitted {
                task,
                worker,
                unit_id,
                answer,
                decision_time_seconds,
            } => on_judgment(&mut out, task, worker, unit_id, answer, *decision_time_seconds)?,
            AdapterEventKind::WorkerAbandoned { task, worker } => {
                let node_id = node_for(out.run, task)?;
                if let Some(s) = out.run.session(&node_id, worker) {
                    let w = s.worker.clone();
                    out.emit(EventBody::SessionEnded {
                        worker: w,
                        node_id,
                        platform_worker: worker.clone(),
                        reason: "ABANDONED".into(),
                    })?;
                }
            }
            AdapterEventKind::ClockTick => on_tick(&mut out)?,
        }
        Ok(out.step)
    }
}

fn node_for(run: &Run, task: &str) -> Result<String, OrchestratorError> {
    run.task_refs
        .get(task)
        .cloned()
        .ok_or_else(|| OrchestratorError::UnknownTask(task.to_string()))
}

fn on_arrival(
    out: &mut Out,
    task: &str,
    platform_worker: &str,
    fingerprint: Option<&str>,
    country: &str,
    trust: f64,
) -> Result<(), OrchestratorError> {
    let node_id = node_for(out.run, task)?;
    if let Some(s) = out.run.session(&node_id, platform_worker) {
        if s.active.is_some() || s.held.is_some() {
            let w = s.worker.clone();
            out.emit(EventBody::SessionEnded {
                worker: w,
                node_id: node_id.clone(),
                platform_worker: platform_worker.to_string(),
                reason: "SUPERSEDED".into(),
            })?;
        }
    }
    let continuation = out.run.session(&node_id, platform_worker).is_some();
    let preview = out
        .run
        .registry
        .preview(&out.run.config.adapter, platform_worker, fingerprint);
    let worker = preview.canonical_id.clone();
    out.emit(EventBody::WorkerArrival {
        node_id: node_id.clone(),
        task: task.to_string(),
        platform_worker: platform_worker.to_string(),
        fingerprint: fingerprint.map(str::to_string),
        country: country.to_string(),
        trust,
        worker: worker.clone(),
        continuation,
    })?;
    let arrival_seq = out.run.seq;
    if let Some((absorbed, survivor)) = preview.merged {
        out.emit(EventBody::WorkerMerged { absorbed, survivor })?;
    }

    let run = &*out.run;
    let node = &run.nodes[&node_id];
    let mut verdict: Result<(DecisionReason, String), DenyReason> = if !run.config.schedule.is_open(out.time) {
        Err(DenyReason::ScheduleClosed)
    } else if run.state() != RunState::Running {
        Err(DenyReason::RunNotRunning)
    } else if node.status() != NodeStatus::Open {
        Err(DenyReason::NodeClosed)
    } else {
        Ok((DecisionReason::ReturningPermitted, String::new()))
    };
    if verdict.is_ok() && !continuation {
        let record = run.registry.get(&worker).expect("arrival registered the worker");
        let spec = run.workflow().node(&node_id).expect("known node");
        let groups: BTreeSet<String> = run.workflow().nodes.iter().map(|n| n.group_id.clone()).collect();
        let d = decide(record, spec, &run.config.policy, &run.ledger, RUN_SCOPE, &groups);
        verdict = if d.is_allow() {
            Ok((d.reason, String::new()))
        } else {
            Err(DenyReason::from_eligibility(d.reason))
        };
    }
    if verdict.is_ok() {
        if let Some(q) = &run.quota {
            if !q.has_room(country) {
                verdict = Err(DenyReason::DenyQuota);
            }
        }
    }
    if let Ok((reason, _)) = verdict {
        let mut rng = assignment_rng(run.config.seed, arrival_seq);
        verdict = match assign_unit(node, &worker, &mut rng) {
            Some(unit) => Ok((reason, unit)),
            None => Err(DenyReason::NoUnitsLeft),
        };
    }

    match verdict {
        Ok((reason, unit_id)) => {
            let reservation = out.run.quota.as_ref().map(QuotaLedger::next_reservation_id);
            out.emit(EventBody::Admitted {
                worker: worker.clone(),
                node_id: node_id.clone(),
                platform_worker: platform_worker.to_string(),
                reason,
                country: country.to_string(),
                reservation,
                continuation,
            })?;
            out.emit(EventBody::UnitAssigned {
                worker,
                node_id,
                platform_worker: platform_worker.to_string(),
                unit_id: unit_id.clone(),
            })?;
            out.command(AdapterCommand::AssignUnit {
                task: task.to_string(),
                worker: platform_worker.to_string(),
                unit_id,
            });
        }
        Err(reason) => {
            out.emit(EventBody::Denied {
                worker: Some(worker),
                node_id,
                platform_worker: platform_worker.to_string(),
                reason,
                unit_id: None,
            })?;
            out.command(AdapterCommand::RejectWorker {
                task: task.to_string(),
                worker: platform_worker.to_string(),
                reason: reason.as_str().to_string(),
            });
        }
    }
    Ok(())
}

fn on_judgment(
    out: &mut Out,
    task: &str,
    platform_worker: &str,
    unit_id: &str,
    answer: &str,
    decision_time_seconds: f64,
) -> Result<(), OrchestratorError> {
    let node_id = node_for(out.run, task)?;
    let deny = |out: &mut Out, worker: Option<String>, reason: DenyReason| {
        out.emit(EventBody::Denied {
            worker,
            node_id: node_id.clone(),
            platform_worker: platform_worker.to_string(),
            reason,
            unit_id: Some(unit_id.to_string()),
        })
    };
    let Some(session) = out.run.session(&node_id, platform_worker).cloned() else {
        deny(out, None, DenyReason::UnexpectedJudgment)?;
        return Ok(());
    };
    let worker = session.worker.clone();
    let Some(active) = session.active.clone().filter(|a| a.unit_id == unit_id) else {
        deny(out, Some(worker), DenyReason::UnexpectedJudgment)?;
        return Ok(());
    };
    if out.time - active.assigned_at >= out.run.ttl() {
        out.emit(EventBody::ReservationExpired {
            worker: worker.clone(),
            node_id: node_id.clone(),
            platform_worker: platform_worker.to_string(),
            unit_id: unit_id.to_string(),
            reservation: active.reservation.clone(),
        })?;
        deny(out, Some(worker), DenyReason::LateJudgment)?;
        return Ok(());
    }
    let schedule = &out.run.config.schedule;
    let mut grace = false;
    if !schedule.is_open(out.time) {
        let closed_at = schedule
            .next_transition(active.assigned_at)
            .unwrap_or(active.assigned_at);
        if out.time >= closed_at + Duration::minutes(i64::from(out.run.config.grace_minutes)) {
            deny(out, Some(worker), DenyReason::GraceExpired)?;
            return Ok(());
        }
        grace = true;
    }
    let spec = out.run.workflow().node(&node_id).expect("known node");
    if !spec.answer_options().iter().any(|o| o == answer) {
        deny(out, Some(worker), DenyReason::InvalidAnswer)?;
        return Ok(());
    }
    let group_id = spec.group_id.clone();
    let gold_correct = out.run.nodes[&node_id]
        .unit(unit_id)
        .and_then(|u| u.unit.gold_answer.as_ref())
        .map(|g| g == answer);
    out.emit(EventBody::Judgment {
        worker,
        node_id: node_id.clone(),
        group_id,
        unit_id: unit_id.to_string(),
        platform_worker: platform_worker.to_string(),
        answer: answer.to_string(),
        decision_time_seconds,
        country: session.country.clone(),
        grace,
        gold_correct,
    })?;
    if out.run.nodes[&node_id].status() == NodeStatus::Closed {
        out.command(AdapterCommand::Cancel {
            task: task.to_string(),
        });
        advance(out)?;
    }
    Ok(())
}

fn on_tick(out: &mut Out) -> Result<(), OrchestratorError> {
    let ttl = out.run.ttl();
    let expired: Vec<_> = out
        .run
        .sessions
        .iter()
        .flat_map(|(node, m)| m.iter().map(move |(pw, s)| (node, pw, s)))
        .filter_map(|(node, pw, s)| {
            let a = s.active.as_ref()?;
            (a.assigned_at + ttl <= out.time).then(|| EventBody::ReservationExpired {
                worker: s.worker.clone(),
                node_id: node.clone(),
                platform_worker: pw.clone(),
                unit_id: a.unit_id.clone(),
                reservation: a.reservation.clone(),
            })
        })
        .collect();
    for body in expired {
        out.emit(body)?;
    }
    let open = out.run.config.schedule.is_open(out.time);
    match out.run.state() {
        RunState::Running if !open => pause(out, Cause::Schedule)?,
        RunState::Paused if open && out.run.lifecycle.last_cause() == Some(Cause::Schedule) => {
            start(out, Action::Resume, Cause::Schedule)?
        }
        _ => {}
    }
    Ok(())
}
