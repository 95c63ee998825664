//! The reference experiment: 8 conditions of 2 tasks each over the same 146
//! gold documents, run either one task after another or interleaved.

use chrono::Duration;
use serde_json::{json, Value};

use crate::adapters::{CrowdModel, CrowdSimulator};
use crate::eligibility::{EligibilityPolicy, ReturningRule};
use crate::orchestrator::{Driver, OrchestratorError, RunConfig};
use crate::population::QuotaSpec;
use chrono::Weekday;

use crate::scheduler::{Action, Recurring, Schedule};
use crate::workflow::{parse_workflow, Workflow};
use crate::{parse_time, Timestamp};

pub const CONDITIONS: usize = 8;
pub const TASKS_PER_CONDITION: usize = 2;
pub const DOCUMENTS: usize = 146;
pub const JUDGMENTS_PER_UNIT: u32 = 3;
/// The frozen seed of the reference runs.
pub const SEED: u64 = 2019;
pub const START: &str = "2019-05-06T00:00:00Z";
/// Runs that have not completed after this long are stopped.
pub const HORIZON_DAYS: i64 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Tasks one after another, no eligibility control.
    Uncontrolled,
    /// Tasks one after another, between-subjects eligibility.
    BetweenSubjects,
    /// Tasks one after another, each country capped at 15% of judgments.
    Quota,
    /// All tasks at once inside windows spread over the day.
    Interleaved,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::Uncontrolled,
        Scenario::BetweenSubjects,
        Scenario::Quota,
        Scenario::Interleaved,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Uncontrolled => "uncontrolled",
            Scenario::BetweenSubjects => "between_subjects",
            Scenario::Quota => "quota",
            Scenario::Interleaved => "interleaved",
        }
    }
}

pub fn start() -> Timestamp {
    parse_time(START).expect("valid start")
}

fn task_id(i: usize) -> String {
    format!("t{:02}", i + 1)
}

fn condition_id(c: usize) -> String {
    format!("c{}", c + 1)
}

fn document(doc: &Value, sequential: bool) -> Workflow {
    let groups: Vec<Value> = (0..CONDITIONS)
        .map(|c| {
            json!({
                "group_id": condition_id(c),
                "label": format!("condition {}", c + 1),
                "support": c % 2 == 1,
            })
        })
        .collect();
    let nodes: Vec<Value> = (0..CONDITIONS * TASKS_PER_CONDITION)
        .map(|i| {
            let c = i / TASKS_PER_CONDITION;
            json!({
                "node_id": task_id(i),
                "title": format!("Relevance judgments, condition {}", c + 1),
                "instructions": "Is the document relevant to the topic?",
                "question_schema": [ { "question_id": "relevant", "options": ["yes", "no"] } ],
                "judgments_per_unit": JUDGMENTS_PER_UNIT,
                "group_id": condition_id(c),
                "reward_per_judgment": 0.01,
            })
        })
        .collect();
    let pass = json!({ "name": "pass_through" });
    let n = nodes.len();
    let mut edges = Vec::new();
    if sequential {
        edges.push(json!({ "from": "$source", "to": task_id(0), "lambda": pass }));
        for i in 1..n {
            edges.push(json!({ "from": task_id(i - 1), "to": task_id(i), "lambda": pass }));
        }
        edges.push(json!({ "from": task_id(n - 1), "to": "$sink", "lambda": pass }));
    } else {
        for i in 0..n {
            edges.push(json!({ "from": "$source", "to": task_id(i), "lambda": pass }));
            edges.push(json!({ "from": task_id(i), "to": "$sink", "lambda": pass }));
        }
    }
    let units: Vec<Value> = (0..DOCUMENTS)
        .map(|d| {
            json!({
                "unit_id": format!("doc-{:03}", d + 1),
                "payload": { "topic": format!("topic-{}", d % 10 + 1) },
                "gold_answer": if d % 3 == 0 { "no" } else { "yes" },
            })
        })
        .collect();
    let mut wf = doc.clone();
    wf["groups"] = Value::Array(groups);
    wf["nodes"] = Value::Array(nodes);
    wf["edges"] = Value::Array(edges);
    wf["input_units"] = Value::Array(units);
    parse_workflow(&wf.to_string()).expect("scenario workflow is valid")
}

/// 16 tasks chained one after another.
pub fn sequential_workflow() -> Workflow {
    document(&json!({ "workflow_id": "relevance-sequential" }), true)
}

/// The same 16 tasks, all fed from the source at once.
pub fn interleaved_workflow() -> Workflow {
    document(&json!({ "workflow_id": "relevance-interleaved" }), false)
}

/// The same four-hour slot every day, shared by all conditions.
pub fn interleaved_schedule(from: Timestamp) -> Schedule {
    let first = from.date_naive();
    Schedule::Recurring(Recurring {
        days: vec![Weekday::Mon, Weekday::Tue, Weekday::Wed, Weekday::Thu, Weekday::Fri, Weekday::Sat, Weekday::Sun],
        start_hour: 18,
        end_hour: 22,
        from_date: first,
        to_date: first + Duration::days(HORIZON_DAYS),
    })
}

pub fn config(scenario: Scenario, seed: u64) -> RunConfig {
    match scenario {
        Scenario::Uncontrolled => RunConfig::new(sequential_workflow(), EligibilityPolicy::open(), "sim", seed),
        Scenario::BetweenSubjects => RunConfig::new(
            sequential_workflow(),
            EligibilityPolicy::between_subjects(ReturningRule::AllowSameGroup),
            "sim",
            seed,
        ),
        Scenario::Quota => RunConfig::new(sequential_workflow(), EligibilityPolicy::open(), "sim", seed)
            .with_quota(QuotaSpec::country(0.15)),
        Scenario::Interleaved => RunConfig::new(interleaved_workflow(), EligibilityPolicy::open(), "sim", seed)
            .with_schedule(interleaved_schedule(start())),
    }
}

/// Deploys, launches and drives a scenario against the simulator until the
/// run ends or the horizon passes.
pub fn run(scenario: Scenario, model: CrowdModel, seed: u64) -> Result<Driver<CrowdSimulator>, OrchestratorError> {
    run_config(config(scenario, seed), model, seed)
}

pub fn run_config(config: RunConfig, model: CrowdModel, seed: u64) -> Result<Driver<CrowdSimulator>, OrchestratorError> {
    let t0 = start();
    let mut d = Driver::deploy(config, CrowdSimulator::new(model, seed), t0)?;
    d.act(Action::Launch)?;
    d.run_until(t0 + Duration::days(HORIZON_DAYS))?;
    Ok(d)
}
