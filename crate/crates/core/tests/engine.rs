use chrono::Duration;
use crowdflow_core::adapters::{CrowdModel, CrowdSimulator};
use crowdflow_core::eligibility::{EligibilityPolicy, ReturningRule};
use crowdflow_core::fixtures::between_subjects_workflow;
use crowdflow_core::orchestrator::{planned_judgments, replay_text, Driver, RunConfig};
use crowdflow_core::scenarios;
use crowdflow_core::scheduler::{Action, RunState};
use crowdflow_core::workflow::{Scalar, MAJORITY_FIELD};
use crowdflow_core::{parse_time, Timestamp};
use serde_json::Value;

fn t0() -> Timestamp {
    scenarios::start()
}

fn driver(seed: u64) -> Driver<CrowdSimulator> {
    let config = RunConfig::new(
        between_subjects_workflow(),
        EligibilityPolicy::between_subjects(ReturningRule::AllowSameGroup),
        "sim",
        seed,
    );
    Driver::deploy(config, CrowdSimulator::new(CrowdModel::calibrated(), seed), t0()).unwrap()
}

fn judgments(text: &str) -> Vec<Value> {
    text.lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["kind"] == "JUDGMENT")
        .collect()
}

#[test]
fn fixture_workflow_runs_to_completion() {
    let mut d = driver(7);
    d.act(Action::Launch).unwrap();
    let state = d.run_until(t0() + Duration::days(7)).unwrap();
    assert_eq!(state, RunState::Completed);

    let text = d.log.to_text();
    let js = judgments(&text);
    assert_eq!(js.len() as u64, planned_judgments(d.run.workflow()).unwrap());

    // both condition nodes aggregate into the confirmation node
    assert_eq!(d.run.sink.len(), 6);
    for item in &d.run.sink {
        assert!(matches!(item.unit.payload.get(MAJORITY_FIELD), Some(Scalar::Str(_))));
    }

    let (replayed, log) = replay_text(&text).unwrap();
    assert_eq!(replayed.state_hash(), d.run.state_hash());
    assert_eq!(log.head(), d.log.head());
}

#[test]
fn between_subjects_keeps_workers_in_one_group() {
    let mut d = driver(11);
    d.act(Action::Launch).unwrap();
    d.run_until(t0() + Duration::days(7)).unwrap();
    let mut groups: std::collections::BTreeMap<String, String> = Default::default();
    for j in judgments(&d.log.to_text()) {
        let w = j["payload"]["worker"].as_str().unwrap().to_string();
        let g = j["payload"]["group_id"].as_str().unwrap().to_string();
        assert_eq!(groups.entry(w).or_insert_with(|| g.clone()), &g);
    }
}

#[test]
fn pause_holds_new_work_until_resume() {
    let config = scenarios::config(scenarios::Scenario::Uncontrolled, 3);
    let mut d = Driver::deploy(config, CrowdSimulator::new(CrowdModel::calibrated(), 3), t0()).unwrap();
    d.act(Action::Launch).unwrap();
    d.run_until(t0() + Duration::hours(6)).unwrap();
    assert_eq!(d.run.state(), RunState::Running);
    d.act(Action::Pause).unwrap();
    let paused_at = d.run.last_time;
    d.run_until(t0() + Duration::days(2)).unwrap();
    assert_eq!(d.run.state(), RunState::Paused);
    for j in judgments(&d.log.to_text()) {
        let at = parse_time(j["time"].as_str().unwrap()).unwrap();
        if at > paused_at {
            assert_eq!(j["payload"]["grace"], true, "only held units may finish while paused");
        }
    }
    d.act(Action::Resume).unwrap();
    assert_eq!(d.run_until(t0() + Duration::days(30)).unwrap(), RunState::Completed);
}

#[test]
fn same_seed_same_log_other_seed_differs() {
    let run = |seed| {
        let mut d = driver(seed);
        d.act(Action::Launch).unwrap();
        d.run_until(t0() + Duration::days(7)).unwrap();
        d.log.to_text()
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert_ne!(a, run(6));
}

#[test]
fn edited_log_fails_replay() {
    let mut d = driver(9);
    d.act(Action::Launch).unwrap();
    d.run_until(t0() + Duration::days(7)).unwrap();
    let text = d.log.to_text();
    let victim = text.lines().position(|l| l.contains("\"JUDGMENT\"")).unwrap();
    let edited: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == victim { l.replacen("\"answer\":\"", "\"answer\":\"x", 1) } else { l.to_string() })
        .collect();
    assert_ne!(edited.join("\n"), text.trim_end());
    assert!(replay_text(&(edited.join("\n") + "\n")).is_err());
}

#[test]
fn aborted_run_refuses_further_actions() {
    let mut d = driver(1);
    d.act(Action::Launch).unwrap();
    d.run_until(t0() + Duration::minutes(30)).unwrap();
    d.act(Action::Abort).unwrap();
    assert_eq!(d.run.state(), RunState::Aborted);
    assert!(d.act(Action::Resume).is_err());
    let (replayed, _) = replay_text(&d.log.to_text()).unwrap();
    assert_eq!(replayed.state(), RunState::Aborted);
}
