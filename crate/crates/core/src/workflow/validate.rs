use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

use super::{Endpoint, LambdaSpec, Workflow};

/// Stable violation codes. The serialized names are part of the API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    EmptyWorkflow,
    DuplicateNode,
    DuplicateGroup,
    DuplicateUnit,
    UnknownGroup,
    DanglingEdge,
    InvalidEndpoint,
    Cycle,
    UnreachableFromSource,
    SinkUnreachable,
    InvalidJudgmentsPerUnit,
    EmptyOptions,
    InvalidPopulationFilter,
    InvalidReward,
    EmptyGoldAnswer,
    InvalidLambdaParams,
    SplitArity,
}

impl ViolationCode {
    pub const ALL: [ViolationCode; 17] = [
        ViolationCode::EmptyWorkflow,
        ViolationCode::DuplicateNode,
        ViolationCode::DuplicateGroup,
        ViolationCode::DuplicateUnit,
        ViolationCode::UnknownGroup,
        ViolationCode::DanglingEdge,
        ViolationCode::InvalidEndpoint,
        ViolationCode::Cycle,
        ViolationCode::UnreachableFromSource,
        ViolationCode::SinkUnreachable,
        ViolationCode::InvalidJudgmentsPerUnit,
        ViolationCode::EmptyOptions,
        ViolationCode::InvalidPopulationFilter,
        ViolationCode::InvalidReward,
        ViolationCode::EmptyGoldAnswer,
        ViolationCode::InvalidLambdaParams,
        ViolationCode::SplitArity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::EmptyWorkflow => "EMPTY_WORKFLOW",
            ViolationCode::DuplicateNode => "DUPLICATE_NODE",
            ViolationCode::DuplicateGroup => "DUPLICATE_GROUP",
            ViolationCode::DuplicateUnit => "DUPLICATE_UNIT",
            ViolationCode::UnknownGroup => "UNKNOWN_GROUP",
            ViolationCode::DanglingEdge => "DANGLING_EDGE",
            ViolationCode::InvalidEndpoint => "INVALID_ENDPOINT",
            ViolationCode::Cycle => "CYCLE",
            ViolationCode::UnreachableFromSource => "UNREACHABLE_FROM_SOURCE",
            ViolationCode::SinkUnreachable => "SINK_UNREACHABLE",
            ViolationCode::InvalidJudgmentsPerUnit => "INVALID_JUDGMENTS_PER_UNIT",
            ViolationCode::EmptyOptions => "EMPTY_OPTIONS",
            ViolationCode::InvalidPopulationFilter => "INVALID_POPULATION_FILTER",
            ViolationCode::InvalidReward => "INVALID_REWARD",
            ViolationCode::EmptyGoldAnswer => "EMPTY_GOLD_ANSWER",
            ViolationCode::InvalidLambdaParams => "INVALID_LAMBDA_PARAMS",
            ViolationCode::SplitArity => "SPLIT_ARITY",
        }
    }
}

/// A failed workflow invariant and the element it concerns. Cycles name
/// their members, comma separated in ascending order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub element: String,
}

impl Violation {
    fn new(code: ViolationCode, element: impl Into<String>) -> Self {
        Self {
            code,
            element: element.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({})", self.code.as_str(), self.element)
    }
}

fn duplicates<'a>(ids: impl Iterator<Item = &'a str>) -> BTreeSet<&'a str> {
    let mut seen = BTreeSet::new();
    ids.filter(|id| !seen.insert(*id)).collect()
}

fn bfs<'a>(start: &'a str, adj: &BTreeMap<&'a str, Vec<&'a str>>) -> BTreeSet<&'a str> {
    let mut seen = BTreeSet::from([start]);
    let mut queue = VecDeque::from([start]);
    while let Some(n) = queue.pop_front() {
        for &m in adj.get(n).map(Vec::as_slice).unwrap_or(&[]) {
            if seen.insert(m) {
                queue.push_back(m);
            }
        }
    }
    seen
}

/// Checks every workflow invariant; an empty result means the workflow is
/// deployable. Violations come back sorted by code, then element.
pub fn validate(workflow: &Workflow) -> Vec<Violation> {
    use ViolationCode::*;
    let mut out = Vec::new();

    if workflow.nodes.is_empty() {
        out.push(Violation::new(EmptyWorkflow, workflow.workflow_id.clone()));
    }
    for id in duplicates(workflow.nodes.iter().map(|n| n.node_id.as_str())) {
        out.push(Violation::new(DuplicateNode, id));
    }
    for id in duplicates(workflow.groups.iter().map(|g| g.group_id.as_str())) {
        out.push(Violation::new(DuplicateGroup, id));
    }
    for id in duplicates(workflow.input_units.iter().map(|u| u.unit_id.as_str())) {
        out.push(Violation::new(DuplicateUnit, id));
    }

    let groups: BTreeSet<&str> = workflow.groups.iter().map(|g| g.group_id.as_str()).collect();
    for node in &workflow.nodes {
        if !groups.contains(node.group_id.as_str()) {
            out.push(Violation::new(UnknownGroup, node.group_id.clone()));
        }
        if node.judgments_per_unit == 0 {
            out.push(Violation::new(InvalidJudgmentsPerUnit, node.node_id.clone()));
        }
        if node.question_schema.is_empty() || node.question_schema.iter().any(|q| q.options.is_empty()) {
            out.push(Violation::new(EmptyOptions, node.node_id.clone()));
        }
        if let Some(filter) = &node.population_filter {
            if !(0.0..=1.0).contains(&filter.min_trust) {
                out.push(Violation::new(InvalidPopulationFilter, node.node_id.clone()));
            }
        }
        if !node.reward_per_judgment.is_finite() || node.reward_per_judgment < 0.0 {
            out.push(Violation::new(InvalidReward, node.node_id.clone()));
        }
    }
    for unit in &workflow.input_units {
        if unit.gold_answer.as_deref() == Some("") {
            out.push(Violation::new(EmptyGoldAnswer, unit.unit_id.clone()));
        }
    }

    let node_ids: BTreeSet<&str> = workflow.nodes.iter().map(|n| n.node_id.as_str()).collect();
    let mut fwd: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut rev: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (idx, edge) in workflow.edges.iter().enumerate() {
        let mut ok = true;
        for endpoint in [&edge.from, &edge.to] {
            if let Endpoint::Node(id) = endpoint {
                if !node_ids.contains(id.as_str()) {
                    out.push(Violation::new(DanglingEdge, id.clone()));
                    ok = false;
                }
            }
        }
        if edge.from == Endpoint::Sink || edge.to == Endpoint::Source {
            out.push(Violation::new(InvalidEndpoint, format!("edge {idx}")));
            ok = false;
        }
        let params_ok = match &edge.lambda {
            LambdaSpec::BalancedSplit { n_outputs } => *n_outputs > 0,
            LambdaSpec::PartitionByKey { key } => !key.is_empty(),
            LambdaSpec::FilterByField { key, values } => {
                !key.is_empty() && values.iter().all(|v| !matches!(v, super::Scalar::Float(f) if !f.is_finite()))
            }
            _ => true,
        };
        if !params_ok {
            out.push(Violation::new(InvalidLambdaParams, format!("edge {idx}")));
        }
        if let LambdaSpec::BalancedSplit { n_outputs } = edge.lambda {
            let group = workflow.fan_out_group(idx);
            // report once per fan-out group, on its first edge
            if n_outputs > 0 && group[0] == idx && group.len() != n_outputs as usize {
                out.push(Violation::new(SplitArity, edge.from.as_str()));
            }
        }
        if ok {
            fwd.entry(edge.from.as_str()).or_default().push(edge.to.as_str());
            rev.entry(edge.to.as_str()).or_default().push(edge.from.as_str());
        }
    }

    // cycles: strongly connected components over node-to-node edges
    let mut graph = DiGraph::<&str, ()>::new();
    let index: BTreeMap<&str, _> = node_ids.iter().map(|id| (*id, graph.add_node(*id))).collect();
    for (from, tos) in &fwd {
        for to in tos {
            if let (Some(&a), Some(&b)) = (index.get(from), index.get(to)) {
                graph.add_edge(a, b, ());
            }
        }
    }
    for scc in tarjan_scc(&graph) {
        let cyclic = scc.len() > 1 || graph.contains_edge(scc[0], scc[0]);
        if cyclic {
            let mut members: Vec<&str> = scc.iter().map(|i| graph[*i]).collect();
            members.sort();
            out.push(Violation::new(Cycle, members.join(",")));
        }
    }

    let from_source = bfs(super::SOURCE, &fwd);
    let to_sink = bfs(super::SINK, &rev);
    for id in &node_ids {
        if !from_source.contains(id) {
            out.push(Violation::new(UnreachableFromSource, *id));
        }
        if !to_sink.contains(id) {
            out.push(Violation::new(SinkUnreachable, *id));
        }
    }

    out.sort();
    out.dedup();
    out
}
