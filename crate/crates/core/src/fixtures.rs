//! Small reference workflows shared by tests, examples and the CLI.

use crate::workflow::{parse_workflow, Workflow};

/// Two parallel condition nodes fed by a balanced split of the input,
/// both feeding a majority-vote aggregation node.
pub const BETWEEN_SUBJECTS_DOC: &str = r##"{
  "workflow_id": "highlight-between",
  "groups": [
    { "group_id": "g_none", "label": "no highlighting", "color": "#4a90d9", "support": false },
    { "group_id": "g_good", "label": "good highlighting", "color": "#e8a33d", "support": true }
  ],
  "nodes": [
    {
      "node_id": "cond_a",
      "title": "Relevance (plain)",
      "instructions": "Is the document relevant to the question?",
      "question_schema": [ { "question_id": "relevant", "options": ["yes", "no"] } ],
      "judgments_per_unit": 3,
      "group_id": "g_none",
      "reward_per_judgment": 0.02
    },
    {
      "node_id": "cond_b",
      "title": "Relevance (highlighted)",
      "instructions": "Is the document relevant to the question? Highlighted excerpts may help.",
      "question_schema": [ { "question_id": "relevant", "options": ["yes", "no"] } ],
      "judgments_per_unit": 3,
      "group_id": "g_good",
      "reward_per_judgment": 0.02
    },
    {
      "node_id": "agg",
      "title": "Confirm majority label",
      "instructions": "Confirm the label chosen by previous workers.",
      "question_schema": [ { "question_id": "agree", "options": ["yes", "no"] } ],
      "judgments_per_unit": 1,
      "group_id": "g_none",
      "reward_per_judgment": 0.01
    }
  ],
  "edges": [
    { "from": "$source", "to": "cond_a", "lambda": { "name": "balanced_split", "params": { "n_outputs": 2 } } },
    { "from": "$source", "to": "cond_b", "lambda": { "name": "balanced_split", "params": { "n_outputs": 2 } } },
    { "from": "cond_a", "to": "agg", "lambda": { "name": "majority_vote" } },
    { "from": "cond_b", "to": "agg", "lambda": { "name": "majority_vote" } },
    { "from": "agg", "to": "$sink", "lambda": { "name": "pass_through" } }
  ],
  "input_units": [
    { "unit_id": "d1", "payload": { "doc_size": "S" }, "gold_answer": "yes" },
    { "unit_id": "d2", "payload": { "doc_size": "M" } },
    { "unit_id": "d3", "payload": { "doc_size": "L" } },
    { "unit_id": "d4", "payload": { "doc_size": "S" }, "gold_answer": "no" },
    { "unit_id": "d5", "payload": { "doc_size": "M" } },
    { "unit_id": "d6", "payload": { "doc_size": "L" } }
  ]
}
"##;

pub fn between_subjects_workflow() -> Workflow {
    parse_workflow(BETWEEN_SUBJECTS_DOC).expect("fixture parses")
}
