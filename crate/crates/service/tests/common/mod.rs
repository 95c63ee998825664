#![allow(dead_code)]

use serde_json::{json, Value};

/// Two conditions, one task each, run one after the other.
pub fn small_workflow(id: &str, units: usize) -> Value {
    let node = |n: &str, g: &str| {
        json!({
            "node_id": n, "title": "Judge", "instructions": "Relevant?",
            "question_schema": [ { "question_id": "relevant", "options": ["yes", "no"] } ],
            "judgments_per_unit": 3, "group_id": g,
        })
    };
    let units: Vec<Value> = (0..units)
        .map(|i| json!({ "unit_id": format!("u{i:02}"), "gold_answer": if i % 2 == 0 { "yes" } else { "no" } }))
        .collect();
    json!({
        "workflow_id": id,
        "groups": [ { "group_id": "ga", "label": "A" }, { "group_id": "gb", "label": "B", "support": true } ],
        "nodes": [ node("a", "ga"), node("b", "gb") ],
        "edges": [
            { "from": "$source", "to": "a", "lambda": { "name": "pass_through" } },
            { "from": "a", "to": "b", "lambda": { "name": "pass_through" } },
            { "from": "b", "to": "$sink", "lambda": { "name": "pass_through" } },
        ],
        "input_units": units,
    })
}

pub fn cyclic_workflow(id: &str) -> Value {
    let mut wf = small_workflow(id, 4);
    wf["edges"].as_array_mut().unwrap().push(json!({ "from": "b", "to": "a", "lambda": { "name": "pass_through" } }));
    wf
}

pub fn fixture(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}
