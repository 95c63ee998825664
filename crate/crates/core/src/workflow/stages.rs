use std::collections::{BTreeMap, BTreeSet};

use super::{Endpoint, Workflow};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("workflow contains a cycle through {}", nodes.join(", "))]
pub struct CycleError {
    /// Nodes that could not be levelled (members of, or downstream of, a cycle).
    pub nodes: Vec<String>,
}

/// Groups nodes into execution stages by longest-path level from the source.
///
/// Nodes in one stage never depend on each other and every node-to-node edge
/// points from an earlier stage to a strictly later one.
pub fn topological_stages(workflow: &Workflow) -> Result<Vec<BTreeSet<String>>, CycleError> {
    let mut indegree: BTreeMap<&str, usize> =
        workflow.nodes.iter().map(|n| (n.node_id.as_str(), 0)).collect();
    let mut succ: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for edge in &workflow.edges {
        if let (Endpoint::Node(from), Endpoint::Node(to)) = (&edge.from, &edge.to) {
            if indegree.contains_key(from.as_str()) && indegree.contains_key(to.as_str()) {
                *indegree.get_mut(to.as_str()).unwrap() += 1;
                succ.entry(from.as_str()).or_default().push(to.as_str());
            }
        }
    }

    let mut level: BTreeMap<&str, usize> = BTreeMap::new();
    let mut ready: Vec<&str> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(n, _)| *n)
        .collect();
    for n in &ready {
        level.insert(n, 0);
    }
    let mut done = 0;
    while let Some(node) = ready.pop() {
        done += 1;
        let next_level = level[node] + 1;
        for &s in succ.get(node).map(Vec::as_slice).unwrap_or(&[]) {
            let l = level.entry(s).or_insert(0);
            *l = (*l).max(next_level);
            let d = indegree.get_mut(s).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push(s);
            }
        }
    }
    if done < indegree.len() {
        let nodes = indegree
            .iter()
            .filter(|(_, d)| **d > 0)
            .map(|(n, _)| n.to_string())
            .collect();
        return Err(CycleError { nodes });
    }

    let depth = level.values().copied().max().map_or(0, |m| m + 1);
    let mut stages = vec![BTreeSet::new(); depth];
    for (node, l) in level {
        stages[l].insert(node.to_string());
    }
    Ok(stages)
}
