//! Experiment workflows: a DAG of crowd task nodes, the experimental groups
//! they belong to, and the lambda edges that route data between them.
//!
//! The document format is JSON with top-level keys `workflow_id`, `groups`,
//! `nodes`, `edges` and `input_units`. Edges name their endpoints by node id,
//! with the reserved pseudo-nodes `"$source"` and `"$sink"`.

mod document;
mod lambda;
mod stages;
mod validate;

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use document::{check_document, parse_workflow, serialize, ParseError};
pub use lambda::{
    apply_lambda, majority, Collection, Item, LambdaError, MajorityOutcome, Vote,
    MAJORITY_FIELD, UNRESOLVED,
};
pub use stages::{topological_stages, CycleError};
pub use validate::{validate, Violation, ViolationCode};

/// Reserved endpoint name for the workflow input.
pub const SOURCE: &str = "$source";
/// Reserved endpoint name for the workflow output.
pub const SINK: &str = "$sink";

/// A scalar payload value. Payloads are flat: no nested objects or arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl Scalar {
    /// Stable textual form, used for partition labels and ordering.
    pub fn key_string(&self) -> String {
        match self {
            Scalar::Bool(b) => b.to_string(),
            Scalar::Int(i) => i.to_string(),
            Scalar::Float(f) => f.to_string(),
            Scalar::Str(s) => s.clone(),
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key_string())
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Str(s.to_string())
    }
}

/// One routing hop: the endpoint a unit left and the lambda that carried it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hop(pub String, pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataUnit {
    pub unit_id: String,
    #[serde(default)]
    pub payload: BTreeMap<String, Scalar>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub provenance: Vec<Hop>,
}

impl DataUnit {
    pub fn new(unit_id: impl Into<String>) -> Self {
        Self {
            unit_id: unit_id.into(),
            payload: BTreeMap::new(),
            gold_answer: None,
            provenance: Vec::new(),
        }
    }

    pub fn with_field(mut self, key: &str, value: impl Into<Scalar>) -> Self {
        self.payload.insert(key.to_string(), value.into());
        self
    }

    pub fn with_gold(mut self, answer: &str) -> Self {
        self.gold_answer = Some(answer.to_string());
        self
    }

    pub fn is_gold(&self) -> bool {
        self.gold_answer.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub question_id: String,
    pub options: Vec<String>,
}

/// Target-population restriction for a task node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationFilter {
    /// Allowed ISO country codes. Empty means any country.
    #[serde(default)]
    pub countries: BTreeSet<String>,
    #[serde(default)]
    pub min_trust: f64,
}

impl PopulationFilter {
    pub fn admits(&self, country: &str, trust: f64) -> bool {
        (self.countries.is_empty() || self.countries.contains(country)) && trust >= self.min_trust
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskNode {
    pub node_id: String,
    pub title: String,
    pub instructions: String,
    pub question_schema: Vec<Question>,
    pub judgments_per_unit: u32,
    pub group_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population_filter: Option<PopulationFilter>,
    #[serde(default)]
    pub reward_per_judgment: f64,
}

impl TaskNode {
    /// Answer options accepted by the node (those of its first question).
    pub fn answer_options(&self) -> &[String] {
        self.question_schema
            .first()
            .map(|q| q.options.as_slice())
            .unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentGroup {
    pub group_id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<String>,
    /// Marks a support dimension for the condition (e.g. highlighting on/off).
    /// Analytics break crossovers down by switch direction when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<bool>,
}

/// The closed set of data-routing combinators that may sit on an edge.
#[derive(Debug, Clone, PartialEq)]
pub enum LambdaSpec {
    PassThrough,
    Union,
    BalancedSplit { n_outputs: u32 },
    PartitionByKey { key: String },
    FilterByField { key: String, values: Vec<Scalar> },
    MajorityVote,
}

impl LambdaSpec {
    pub const NAMES: [&'static str; 6] = [
        "pass_through",
        "union",
        "balanced_split",
        "partition_by_key",
        "filter_by_field",
        "majority_vote",
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LambdaSpec::PassThrough => "pass_through",
            LambdaSpec::Union => "union",
            LambdaSpec::BalancedSplit { .. } => "balanced_split",
            LambdaSpec::PartitionByKey { .. } => "partition_by_key",
            LambdaSpec::FilterByField { .. } => "filter_by_field",
            LambdaSpec::MajorityVote => "majority_vote",
        }
    }

    /// Fan-out combinators are evaluated once per source and their outputs are
    /// distributed over the source's edges that carry the same spec.
    pub fn is_fan_out(&self) -> bool {
        matches!(
            self,
            LambdaSpec::BalancedSplit { .. } | LambdaSpec::PartitionByKey { .. }
        )
    }
}

/// An edge endpoint.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Source,
    Sink,
    Node(String),
}

impl Endpoint {
    pub fn parse(s: &str) -> Self {
        match s {
            SOURCE => Endpoint::Source,
            SINK => Endpoint::Sink,
            other => Endpoint::Node(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Endpoint::Source => SOURCE,
            Endpoint::Sink => SINK,
            Endpoint::Node(id) => id,
        }
    }

    pub fn node(&self) -> Option<&str> {
        match self {
            Endpoint::Node(id) => Some(id),
            _ => None,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: Endpoint,
    pub to: Endpoint,
    pub lambda: LambdaSpec,
}

impl Edge {
    pub fn new(from: &str, to: &str, lambda: LambdaSpec) -> Self {
        Self {
            from: Endpoint::parse(from),
            to: Endpoint::parse(to),
            lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workflow {
    pub workflow_id: String,
    pub groups: Vec<ExperimentGroup>,
    pub nodes: Vec<TaskNode>,
    pub edges: Vec<Edge>,
    pub input_units: Vec<DataUnit>,
}

impl Workflow {
    pub fn node(&self, node_id: &str) -> Option<&TaskNode> {
        self.nodes.iter().find(|n| n.node_id == node_id)
    }

    pub fn group(&self, group_id: &str) -> Option<&ExperimentGroup> {
        self.groups.iter().find(|g| g.group_id == group_id)
    }

    /// Indices of the edges leaving `from`, in declaration order.
    pub fn out_edges<'a>(&'a self, from: &'a Endpoint) -> impl Iterator<Item = usize> + 'a {
        self.edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| &e.from == from)
            .map(|(i, _)| i)
    }

    /// Indices of the edges entering `to`, in declaration order.
    pub fn in_edges<'a>(&'a self, to: &'a Endpoint) -> impl Iterator<Item = usize> + 'a {
        self.edges
            .iter()
            .enumerate()
            .filter(move |(_, e)| &e.to == to)
            .map(|(i, _)| i)
    }

    /// The edges that share one fan-out evaluation with `edge_idx`: same
    /// source, same combinator spec, in declaration order.
    pub fn fan_out_group(&self, edge_idx: usize) -> Vec<usize> {
        let edge = &self.edges[edge_idx];
        if !edge.lambda.is_fan_out() {
            return vec![edge_idx];
        }
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.from == edge.from && e.lambda == edge.lambda)
            .map(|(i, _)| i)
            .collect()
    }
}
