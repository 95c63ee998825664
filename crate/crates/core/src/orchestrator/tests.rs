use chrono::Duration;

use super::*;
use crate::adapters::{AdapterCommand, AdapterEvent, AdapterEventKind, CrowdModel, CrowdSimulator};
use crate::eligibility::{EligibilityPolicy, ReturningRule};
use crate::fixtures::between_subjects_workflow;
use crate::population::QuotaSpec;
use crate::scheduler::{Action, Cause, RunState, Schedule, Window};
use crate::workflow::{parse_workflow, Workflow};
use crate::{parse_time, Timestamp};

fn t(s: &str) -> Timestamp {
    parse_time(s).unwrap()
}

fn single_node(units: usize, k: u32) -> Workflow {
    let inputs: Vec<String> = (1..=units)
        .map(|i| format!(r#"{{ "unit_id": "u{i}", "gold_answer": "yes" }}"#))
        .collect();
    parse_workflow(&format!(
        r#"{{
          "workflow_id": "one",
          "groups": [ {{ "group_id": "g", "label": "only" }} ],
          "nodes": [ {{
            "node_id": "n", "title": "t", "instructions": "i",
            "question_schema": [ {{ "question_id": "q", "options": ["yes", "no"] }} ],
            "judgments_per_unit": {k}, "group_id": "g"
          }} ],
          "edges": [
            {{ "from": "$source", "to": "n", "lambda": {{ "name": "pass_through" }} }},
            {{ "from": "n", "to": "$sink", "lambda": {{ "name": "pass_through" }} }}
          ],
          "input_units": [ {} ]
        }}"#,
        inputs.join(",")
    ))
    .unwrap()
}

fn arrival(at: &str, task: &str, worker: &str, country: &str) -> AdapterEvent {
    AdapterEvent {
        time: t(at),
        kind: AdapterEventKind::WorkerArrival {
            task: task.into(),
            worker: worker.into(),
            fingerprint: None,
            country: country.into(),
            trust: 0.9,
        },
    }
}

fn judgment(at: &str, task: &str, worker: &str, unit: &str, answer: &str) -> AdapterEvent {
    AdapterEvent {
        time: t(at),
        kind: AdapterEventKind::JudgmentSubmitted {
            task: task.into(),
            worker: worker.into(),
            unit_id: unit.into(),
            answer: answer.into(),
            decision_time_seconds: 12.0,
        },
    }
}

fn created(at: &str, node: &str, task: &str) -> AdapterEvent {
    AdapterEvent {
        time: t(at),
        kind: AdapterEventKind::TaskCreated {
            node_id: node.into(),
            task: task.into(),
        },
    }
}

fn kinds(step: &Step) -> Vec<&'static str> {
    step.events.iter().map(|e| e.body.kind()).collect()
}

fn assigned(step: &Step) -> String {
    step.commands
        .iter()
        .find_map(|c| match c {
            AdapterCommand::AssignUnit { unit_id, .. } => Some(unit_id.clone()),
            _ => None,
        })
        .expect("unit assigned")
}

/// Every step of a tiny run checked by hand: one node, three units, one
/// judgment each, one worker who keeps asking for more.
#[test]
fn hand_traced_single_node_run() {
    let cfg = RunConfig::new(single_node(3, 1), EligibilityPolicy::open(), "sim", 7);
    let (mut run, step) = deploy(cfg, t("2024-01-01T00:00:00Z")).unwrap();
    assert_eq!(kinds(&step), ["DEPLOYED", "LAMBDA_APPLIED", "STAGE_ADVANCED"]);
    assert_eq!(step.commands.len(), 1);
    assert!(matches!(&step.commands[0], AdapterCommand::CreateTask { units, .. } if units.len() == 3));
    assert_eq!(run.state(), RunState::Deployed);

    let s = run.handle(&created("2024-01-01T00:00:00Z", "n", "T1")).unwrap();
    assert_eq!(kinds(&s), ["TASK_CREATED"]);
    assert!(s.commands.is_empty());

    let s = run.act(Action::Launch, t("2024-01-01T00:01:00Z")).unwrap();
    assert_eq!(kinds(&s), ["LIFECYCLE"]);
    assert_eq!(s.commands, [AdapterCommand::Launch { task: "T1".into() }]);

    let mut seen = Vec::new();
    for (i, minute) in ["02", "03", "04"].iter().enumerate() {
        let s = run
            .handle(&arrival(&format!("2024-01-01T00:{minute}:00Z"), "T1", "p1", "VE"))
            .unwrap();
        assert_eq!(kinds(&s), ["WORKER_ARRIVAL", "ADMITTED", "UNIT_ASSIGNED"]);
        let unit = assigned(&s);
        assert!(!seen.contains(&unit));
        seen.push(unit.clone());
        let s = run
            .handle(&judgment(&format!("2024-01-01T00:{minute}:30Z"), "T1", "p1", &unit, "yes"))
            .unwrap();
        if i < 2 {
            assert_eq!(kinds(&s), ["JUDGMENT"]);
        } else {
            assert_eq!(
                kinds(&s),
                ["JUDGMENT", "LAMBDA_APPLIED", "LIFECYCLE", "RUN_COMPLETED"]
            );
            assert_eq!(s.commands, [AdapterCommand::Cancel { task: "T1".into() }]);
        }
    }
    seen.sort();
    assert_eq!(seen, ["u1", "u2", "u3"]);
    assert_eq!(run.state(), RunState::Completed);
    assert_eq!(run.sink.len(), 3);
    assert_eq!(run.registry.len(), 1);
}

#[test]
fn between_subjects_deploy_creates_the_two_condition_tasks() {
    let cfg = RunConfig::new(
        between_subjects_workflow(),
        EligibilityPolicy::between_subjects(ReturningRule::AllowSameTask),
        "sim",
        1,
    );
    let (run, step) = deploy(cfg, t("2024-01-01T00:00:00Z")).unwrap();
    let created: Vec<(String, usize)> = step
        .commands
        .iter()
        .filter_map(|c| match c {
            AdapterCommand::CreateTask { node, units } => Some((node.node_id.clone(), units.len())),
            _ => None,
        })
        .collect();
    assert_eq!(created, [("cond_a".to_string(), 3), ("cond_b".to_string(), 3)]);
    assert_eq!(run.nodes["agg"].status(), NodeStatus::Pending);
}

#[test]
fn cyclic_workflow_is_refused() {
    let mut wf = single_node(1, 1);
    wf.edges.push(crate::workflow::Edge::new("n", "n", crate::workflow::LambdaSpec::PassThrough));
    let cfg = RunConfig::new(wf, EligibilityPolicy::open(), "sim", 1);
    assert!(matches!(
        deploy(cfg, t("2024-01-01T00:00:00Z")),
        Err(OrchestratorError::Invalid(_))
    ));
}

#[test]
fn infeasible_quota_is_refused() {
    // 3 planned judgments, floor(0.2 * 3) = 0 slots
    let cfg = RunConfig::new(single_node(3, 1), EligibilityPolicy::open(), "sim", 1).with_quota(QuotaSpec::country(0.2));
    assert!(matches!(
        deploy(cfg, t("2024-01-01T00:00:00Z")),
        Err(OrchestratorError::Quota(_))
    ));
    let mut q = QuotaSpec::country(0.5);
    q.attribute = "age".into();
    let cfg = RunConfig::new(single_node(3, 1), EligibilityPolicy::open(), "sim", 1).with_quota(q);
    assert!(matches!(
        deploy(cfg, t("2024-01-01T00:00:00Z")),
        Err(OrchestratorError::UnsupportedAttribute(_))
    ));
}

#[test]
fn planned_judgments_follow_routing() {
    // 6 units split 3/3 at k=3, then 6 majority-voted units at k=1
    assert_eq!(planned_judgments(&between_subjects_workflow()).unwrap(), 24);
    assert_eq!(planned_judgments(&single_node(5, 2)).unwrap(), 10);
}

#[test]
fn assign_unit_prefers_most_needed_untouched_units() {
    let cfg = RunConfig::new(single_node(3, 2), EligibilityPolicy::open(), "sim", 1);
    let (mut run, _) = deploy(cfg, t("2024-01-01T00:00:00Z")).unwrap();
    run.handle(&created("2024-01-01T00:00:00Z", "n", "T")).unwrap();
    run.act(Action::Launch, t("2024-01-01T00:00:00Z")).unwrap();
    let s = run.handle(&arrival("2024-01-01T00:01:00Z", "T", "a", "VE")).unwrap();
    let first = assigned(&s);
    run.handle(&judgment("2024-01-01T00:01:10Z", "T", "a", &first, "yes")).unwrap();

    let node = &run.nodes["n"];
    let mut rng = assignment_rng(1, 99);
    // worker a already judged `first`; the other two still need 2 each
    for _ in 0..20 {
        let u = assign_unit(node, "w1", &mut rng).unwrap();
        assert_ne!(u, first);
    }
    // a fresh worker also avoids `first`, whose need dropped to 1
    for _ in 0..20 {
        assert_ne!(assign_unit(node, "w9", &mut rng).unwrap(), first);
    }
}

#[test]
fn assign_unit_counts_inflight_and_exhausts() {
    let cfg = RunConfig::new(single_node(2, 1), EligibilityPolicy::open(), "sim", 1);
    let (mut run, _) = deploy(cfg, t("2024-01-01T00:00:00Z")).unwrap();
    run.handle(&created("2024-01-01T00:00:00Z", "n", "T")).unwrap();
    run.act(Action::Launch, t("2024-01-01T00:00:00Z")).unwrap();
    let a = assigned(&run.handle(&arrival("2024-01-01T00:01:00Z", "T", "a", "VE")).unwrap());
    let b = assigned(&run.handle(&arrival("2024-01-01T00:01:00Z", "T", "b", "VE")).unwrap());
    assert_ne!(a, b);
    let s = run.handle(&arrival("2024-01-01T00:01:00Z", "T", "c", "VE")).unwrap();
    assert_eq!(kinds(&s), ["WORKER_ARRIVAL", "DENIED"]);
    assert!(matches!(
        s.events[1].body,
        EventBody::Denied { reason: DenyReason::NoUnitsLeft, .. }
    ));
    assert!(matches!(&s.commands[0], AdapterCommand::RejectWorker { reason, .. } if reason == "NO_UNITS_LEFT"));
}

#[test]
fn crossover_is_denied_under_between_subjects() {
    let cfg = RunConfig::new(
        between_subjects_workflow(),
        EligibilityPolicy::between_subjects(ReturningRule::AllowSameTask),
        "sim",
        3,
    );
    let (mut run, _) = deploy(cfg, t("2024-01-01T00:00:00Z")).unwrap();
    run.handle(&created("2024-01-01T00:00:00Z", "cond_a", "A")).unwrap();
    run.handle(&created("2024-01-01T00:00:00Z", "cond_b", "B")).unwrap();
    run.act(Action::Launch, t("2024-01-01T00:00:00Z")).unwrap();
    let u = assigned(&run.handle(&arrival("2024-01-01T00:01:00Z", "A", "p", "EG")).unwrap());
    run.handle(&judgment("2024-01-01T00:01:20Z", "A", "p", &u, "yes")).unwrap();
    let s = run.handle(&arrival("2024-01-01T00:02:00Z", "B", "p", "EG")).unwrap();
    assert!(matches!(
        s.events.last().unwrap().body,
        EventBody::Denied { reason: DenyReason::DenyCrossover, .. }
    ));
}

#[test]
fn judgment_without_assignment_is_rejected() {
    let cfg = RunConfig::new(single_node(2, 1), EligibilityPolicy::open(), "sim", 1);
    let (mut run, _) = deploy(cfg, t("2024-01-01T00:00:00Z")).unwrap();
    run.handle(&created("2024-01-01T00:00:00Z", "n", "T")).unwrap();
    run.act(Action::Launch, t("2024-01-01T00:00:00Z")).unwrap();
    let s = run.handle(&judgment("2024-01-01T00:01:00Z", "T", "ghost", "u1", "yes")).unwrap();
    assert!(matches!(
        s.events[0].body,
        EventBody::Denied { reason: DenyReason::UnexpectedJudgment, .. }
    ));
    let u = assigned(&run.handle(&arrival("2024-01-01T00:02:00Z", "T", "a", "VE")).unwrap());
    let s = run.handle(&judgment("2024-01-01T00:02:10Z", "T", "a", &u, "maybe")).unwrap();
    assert!(matches!(
        s.events[0].body,
        EventBody::Denied { reason: DenyReason::InvalidAnswer, .. }
    ));
}

#[test]
fn illegal_actions_are_conflicts() {
    let cfg = RunConfig::new(single_node(1, 1), EligibilityPolicy::open(), "sim", 1);
    let (mut run, _) = deploy(cfg, t("2024-01-01T00:00:00Z")).unwrap();
    assert!(matches!(
        run.act(Action::Pause, t("2024-01-01T00:00:00Z")),
        Err(OrchestratorError::Transition(_))
    ));
    assert!(matches!(
        run.act(Action::Resume, t("2024-01-01T00:00:00Z")),
        Err(OrchestratorError::Transition(_))
    ));
    run.act(Action::Abort, t("2024-01-01T00:00:00Z")).unwrap();
    assert!(matches!(
        run.act(Action::Launch, t("2024-01-01T00:00:00Z")),
        Err(OrchestratorError::Transition(_))
    ));
}

fn windowed(windows: &[(&str, &str)]) -> Schedule {
    Schedule::Windows(
        windows
            .iter()
            .map(|(a, b)| Window { start: t(a), end: t(b) })
            .collect(),
    )
}

#[test]
fn schedule_pauses_resumes_and_grants_grace() {
    let schedule = windowed(&[
        ("2024-01-01T10:00:00Z", "2024-01-01T11:00:00Z"),
        ("2024-01-01T12:00:00Z", "2024-01-01T13:00:00Z"),
    ]);
    let cfg = RunConfig::new(single_node(4, 1), EligibilityPolicy::open(), "sim", 1).with_schedule(schedule);
    let (mut run, _) = deploy(cfg, t("2024-01-01T09:00:00Z")).unwrap();
    run.handle(&created("2024-01-01T09:00:00Z", "n", "T")).unwrap();

    // launched outside a window: RUNNING then straight to PAUSED(SCHEDULE)
    let s = run.act(Action::Launch, t("2024-01-01T09:30:00Z")).unwrap();
    assert_eq!(kinds(&s), ["LIFECYCLE", "LIFECYCLE"]);
    assert_eq!(run.state(), RunState::Paused);
    assert_eq!(run.lifecycle.last_cause(), Some(Cause::Schedule));
    let s = run.handle(&arrival("2024-01-01T09:40:00Z", "T", "a", "VE")).unwrap();
    assert!(matches!(
        s.events[1].body,
        EventBody::Denied { reason: DenyReason::ScheduleClosed, .. }
    ));

    let s = run.handle(&AdapterEvent::tick(t("2024-01-01T10:00:00Z"))).unwrap();
    assert_eq!(kinds(&s), ["LIFECYCLE"]);
    assert_eq!(run.state(), RunState::Running);

    let u1 = assigned(&run.handle(&arrival("2024-01-01T10:55:00Z", "T", "a", "VE")).unwrap());
    let u2 = assigned(&run.handle(&arrival("2024-01-01T10:58:00Z", "T", "b", "VE")).unwrap());
    run.handle(&AdapterEvent::tick(t("2024-01-01T11:00:00Z"))).unwrap();
    assert_eq!(run.state(), RunState::Paused);

    let s = run.handle(&judgment("2024-01-01T11:05:00Z", "T", "a", &u1, "yes")).unwrap();
    assert!(matches!(s.events[0].body, EventBody::Judgment { grace: true, .. }));
    let s = run.handle(&judgment("2024-01-01T11:10:00Z", "T", "b", &u2, "yes")).unwrap();
    assert!(matches!(
        s.events[0].body,
        EventBody::Denied { reason: DenyReason::GraceExpired, .. }
    ));

    // a manual pause is not lifted by the next window
    run.handle(&AdapterEvent::tick(t("2024-01-01T12:00:00Z"))).unwrap();
    assert_eq!(run.state(), RunState::Running);
    run.act(Action::Pause, t("2024-01-01T12:10:00Z")).unwrap();
    run.handle(&AdapterEvent::tick(t("2024-01-01T13:00:00Z"))).unwrap();
    assert_eq!(run.state(), RunState::Paused);
    assert_eq!(run.lifecycle.last_cause(), Some(Cause::Manual));
}

#[test]
fn unanswered_assignment_expires_and_late_judgment_is_refused() {
    let cfg = RunConfig::new(single_node(1, 1), EligibilityPolicy::open(), "sim", 1);
    let (mut run, _) = deploy(cfg, t("2024-01-01T00:00:00Z")).unwrap();
    run.handle(&created("2024-01-01T00:00:00Z", "n", "T")).unwrap();
    run.act(Action::Launch, t("2024-01-01T00:00:00Z")).unwrap();
    let u = assigned(&run.handle(&arrival("2024-01-01T00:00:00Z", "T", "a", "VE")).unwrap());
    assert_eq!(run.next_expiry(), Some(t("2024-01-01T00:30:00Z")));
    // the only unit is in flight
    let s = run.handle(&arrival("2024-01-01T00:10:00Z", "T", "b", "VE")).unwrap();
    assert_eq!(kinds(&s), ["WORKER_ARRIVAL", "DENIED"]);

    let s = run.handle(&judgment("2024-01-01T00:31:00Z", "T", "a", &u, "yes")).unwrap();
    assert_eq!(kinds(&s), ["RESERVATION_EXPIRED", "DENIED"]);
    assert!(matches!(
        s.events[1].body,
        EventBody::Denied { reason: DenyReason::LateJudgment, .. }
    ));
    assert_eq!(run.next_expiry(), None);
    let s = run.handle(&arrival("2024-01-01T00:32:00Z", "T", "b", "VE")).unwrap();
    assert_eq!(assigned(&s), u);
}

#[test]
fn quota_blocks_a_full_country() {
    // 4 planned judgments at cap 0.5 leaves 2 per country
    let cfg = RunConfig::new(single_node(4, 1), EligibilityPolicy::open(), "sim", 1).with_quota(QuotaSpec::country(0.5));
    let (mut run, _) = deploy(cfg, t("2024-01-01T00:00:00Z")).unwrap();
    run.handle(&created("2024-01-01T00:00:00Z", "n", "T")).unwrap();
    run.act(Action::Launch, t("2024-01-01T00:00:00Z")).unwrap();
    for (i, w) in ["a", "b"].iter().enumerate() {
        let at = format!("2024-01-01T00:0{i}:00Z");
        let u = assigned(&run.handle(&arrival(&at, "T", w, "VE")).unwrap());
        run.handle(&judgment(&at, "T", w, &u, "yes")).unwrap();
    }
    let s = run.handle(&arrival("2024-01-01T00:05:00Z", "T", "c", "VE")).unwrap();
    assert!(matches!(
        s.events[1].body,
        EventBody::Denied { reason: DenyReason::DenyQuota, .. }
    ));
    let s = run.handle(&arrival("2024-01-01T00:05:00Z", "T", "d", "EG")).unwrap();
    assert_eq!(kinds(&s), ["WORKER_ARRIVAL", "ADMITTED", "UNIT_ASSIGNED"]);
}

fn simulated(seed: u64, hours: i64) -> Driver<CrowdSimulator> {
    let mut model = CrowdModel::calibrated();
    model.base_arrival_rate = 20.0;
    let cfg = RunConfig::new(
        between_subjects_workflow(),
        EligibilityPolicy::between_subjects(ReturningRule::AllowSameTask),
        "sim",
        seed,
    )
    .with_quota(QuotaSpec::country(0.5));
    let start = t("2024-03-01T00:00:00Z");
    let mut d = Driver::deploy(cfg, CrowdSimulator::new(model, seed), start).unwrap();
    d.act(Action::Launch).unwrap();
    d.run_until(start + Duration::hours(hours)).unwrap();
    d
}

#[test]
fn simulated_run_completes_and_replays_exactly() {
    let d = simulated(11, 48);
    assert_eq!(d.run.state(), RunState::Completed);
    assert_eq!(d.run.sink.len(), 6);
    let (replayed, log) = replay_text(&d.log.to_text()).unwrap();
    assert_eq!(replayed.state_hash(), d.run.state_hash());
    assert_eq!(log.head(), d.log.head());
}

#[test]
fn identical_seeds_give_identical_logs() {
    let a = simulated(5, 48);
    let b = simulated(5, 48);
    assert_eq!(a.log.to_text(), b.log.to_text());
    let c = simulated(6, 48);
    assert_ne!(a.log.to_text(), c.log.to_text());
}

#[test]
fn every_prefix_replays_to_the_live_state() {
    let cfg = RunConfig::new(single_node(6, 2), EligibilityPolicy::open(), "sim", 2);
    let start = t("2024-03-01T00:00:00Z");
    let mut d = Driver::deploy(cfg, CrowdSimulator::new(CrowdModel::calibrated(), 2), start).unwrap();
    d.act(Action::Launch).unwrap();
    let mut hashes = vec![d.run.state_hash()];
    let mut lens = vec![d.log.len()];
    while d.step(start + Duration::hours(24)).unwrap() {
        hashes.push(d.run.state_hash());
        lens.push(d.log.len());
    }
    assert_eq!(d.run.state(), RunState::Completed);
    let text = d.log.to_text();
    let lines: Vec<&str> = text.lines().collect();
    for (h, n) in hashes.iter().zip(&lens) {
        let prefix = lines[..*n].join("\n");
        let (run, _) = replay_text(&prefix).unwrap();
        assert_eq!(&run.state_hash(), h);
    }
}

#[test]
fn replay_rejects_a_doctored_decision() {
    let d = simulated(9, 48);
    let (_, events) = EventLog::parse(&d.log.to_text()).unwrap();
    let mut events = events;
    let idx = events
        .iter()
        .position(|e| matches!(e.body, EventBody::UnitAssigned { .. }))
        .unwrap();
    if let EventBody::UnitAssigned { unit_id, .. } = &mut events[idx].body {
        *unit_id = "nope".into();
    }
    assert!(replay(&events).is_err());
}
