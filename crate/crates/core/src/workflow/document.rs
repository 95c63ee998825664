use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{DataUnit, Edge, Endpoint, ExperimentGroup, LambdaSpec, Scalar, TaskNode, Workflow};
use super::validate::{validate, Violation, ViolationCode};
use crate::canonical::canonical_pretty;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("missing required field `{field}` (line {line}, column {column})")]
    MissingField {
        field: String,
        line: usize,
        column: usize,
    },
    #[error("invalid document at line {line}, column {column}: {message}")]
    Schema {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unknown combinator `{0}`")]
    UnknownCombinator(String),
    #[error("invalid params for `{lambda}`: {message}")]
    InvalidParams { lambda: String, message: String },
    #[error("duplicate {kind} id `{id}`")]
    DuplicateId { kind: &'static str, id: String },
    #[error("workflow must contain at least one task node")]
    EmptyWorkflow,
    #[error("edge references undefined node `{0}`")]
    DanglingReference(String),
}

impl From<serde_json::Error> for ParseError {
    fn from(err: serde_json::Error) -> Self {
        use serde_json::error::Category;
        let (line, column) = (err.line(), err.column());
        let message = err.to_string();
        match err.classify() {
            Category::Data => {
                if let Some(rest) = message.strip_prefix("missing field `") {
                    let field = rest.split('`').next().unwrap_or_default().to_string();
                    ParseError::MissingField {
                        field,
                        line,
                        column,
                    }
                } else {
                    ParseError::Schema {
                        line,
                        column,
                        message,
                    }
                }
            }
            _ => ParseError::Syntax {
                line,
                column,
                message,
            },
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorkflow {
    workflow_id: String,
    groups: Vec<ExperimentGroup>,
    nodes: Vec<TaskNode>,
    edges: Vec<RawEdge>,
    input_units: Vec<DataUnit>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    from: String,
    to: String,
    lambda: RawLambda,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLambda {
    name: String,
    #[serde(default)]
    params: Map<String, Value>,
}

impl From<&LambdaSpec> for RawLambda {
    fn from(spec: &LambdaSpec) -> Self {
        let mut params = Map::new();
        match spec {
            LambdaSpec::BalancedSplit { n_outputs } => {
                params.insert("n_outputs".into(), Value::from(*n_outputs));
            }
            LambdaSpec::PartitionByKey { key } => {
                params.insert("key".into(), Value::from(key.clone()));
            }
            LambdaSpec::FilterByField { key, values } => {
                params.insert("key".into(), Value::from(key.clone()));
                let values = values
                    .iter()
                    .map(|v| serde_json::to_value(v).expect("scalar serializes"))
                    .collect();
                params.insert("values".into(), Value::Array(values));
            }
            LambdaSpec::PassThrough | LambdaSpec::Union | LambdaSpec::MajorityVote => {}
        }
        RawLambda {
            name: spec.name().to_string(),
            params,
        }
    }
}

impl TryFrom<RawLambda> for LambdaSpec {
    type Error = ParseError;

    fn try_from(raw: RawLambda) -> Result<Self, ParseError> {
        let invalid = |message: String| ParseError::InvalidParams {
            lambda: raw.name.clone(),
            message,
        };
        let string_param = |key: &str| -> Result<String, ParseError> {
            match raw.params.get(key) {
                Some(Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(invalid(format!("`{key}` must be a string"))),
                None => Err(invalid(format!("missing `{key}`"))),
            }
        };
        let allowed: &[&str] = match raw.name.as_str() {
            "pass_through" | "union" | "majority_vote" => &[],
            "balanced_split" => &["n_outputs"],
            "partition_by_key" => &["key"],
            "filter_by_field" => &["key", "values"],
            other => return Err(ParseError::UnknownCombinator(other.to_string())),
        };
        if let Some(extra) = raw.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(invalid(format!("unexpected parameter `{extra}`")));
        }
        let spec = match raw.name.as_str() {
            "pass_through" => LambdaSpec::PassThrough,
            "union" => LambdaSpec::Union,
            "majority_vote" => LambdaSpec::MajorityVote,
            "balanced_split" => {
                let n = raw
                    .params
                    .get("n_outputs")
                    .ok_or_else(|| invalid("missing `n_outputs`".into()))?
                    .as_u64()
                    .and_then(|n| u32::try_from(n).ok())
                    .ok_or_else(|| invalid("`n_outputs` must be a positive integer".into()))?;
                LambdaSpec::BalancedSplit { n_outputs: n }
            }
            "partition_by_key" => LambdaSpec::PartitionByKey {
                key: string_param("key")?,
            },
            "filter_by_field" => {
                let key = string_param("key")?;
                let values = match raw.params.get("values") {
                    Some(Value::Array(items)) => items
                        .iter()
                        .map(|v| match v {
                            Value::Null | Value::Array(_) | Value::Object(_) => {
                                Err(invalid("`values` must hold scalars".into()))
                            }
                            v => serde_json::from_value::<Scalar>(v.clone())
                                .map_err(|e| invalid(e.to_string())),
                        })
                        .collect::<Result<Vec<_>, _>>()?,
                    Some(_) => return Err(invalid("`values` must be an array".into())),
                    None => return Err(invalid("missing `values`".into())),
                };
                LambdaSpec::FilterByField { key, values }
            }
            _ => unreachable!("name checked above"),
        };
        Ok(spec)
    }
}

fn check_unique<'a>(
    kind: &'static str,
    ids: impl Iterator<Item = &'a str>,
) -> Result<(), ParseError> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(ParseError::DuplicateId {
                kind,
                id: id.to_string(),
            });
        }
    }
    Ok(())
}

/// Parses a workflow document. Structural problems that the document grammar
/// cannot express (cycles, unknown groups, reachability) are left to
/// [`validate`](super::validate).
pub fn parse_workflow(text: &str) -> Result<Workflow, ParseError> {
    let raw: RawWorkflow = serde_json::from_str(text)?;
    if raw.nodes.is_empty() {
        return Err(ParseError::EmptyWorkflow);
    }
    check_unique("group", raw.groups.iter().map(|g| g.group_id.as_str()))?;
    check_unique("node", raw.nodes.iter().map(|n| n.node_id.as_str()))?;
    check_unique("unit", raw.input_units.iter().map(|u| u.unit_id.as_str()))?;

    let node_ids: BTreeSet<&str> = raw.nodes.iter().map(|n| n.node_id.as_str()).collect();
    let mut edges = Vec::with_capacity(raw.edges.len());
    for edge in raw.edges {
        for endpoint in [&edge.from, &edge.to] {
            if let Endpoint::Node(id) = Endpoint::parse(endpoint) {
                if !node_ids.contains(id.as_str()) {
                    return Err(ParseError::DanglingReference(id));
                }
            }
        }
        edges.push(Edge {
            from: Endpoint::parse(&edge.from),
            to: Endpoint::parse(&edge.to),
            lambda: LambdaSpec::try_from(edge.lambda)?,
        });
    }

    Ok(Workflow {
        workflow_id: raw.workflow_id,
        groups: raw.groups,
        nodes: raw.nodes,
        edges,
        input_units: raw.input_units,
    })
}

/// Canonical JSON form of a workflow as a [`Value`].
pub(crate) fn to_value(workflow: &Workflow) -> Value {
    let raw = RawWorkflow {
        workflow_id: workflow.workflow_id.clone(),
        groups: workflow.groups.clone(),
        nodes: workflow.nodes.clone(),
        edges: workflow
            .edges
            .iter()
            .map(|e| RawEdge {
                from: e.from.as_str().to_string(),
                to: e.to.as_str().to_string(),
                lambda: RawLambda::from(&e.lambda),
            })
            .collect(),
        input_units: workflow.input_units.clone(),
    };
    serde_json::to_value(raw).expect("workflow serializes")
}

impl Serialize for Workflow {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        to_value(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Workflow {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        parse_workflow(&value.to_string()).map_err(serde::de::Error::custom)
    }
}

/// Parses and validates a document. Structural defects the parser refuses
/// outright are reported as violations too, so only unreadable documents
/// are errors.
pub fn check_document(text: &str) -> Result<(Option<Workflow>, Vec<Violation>), ParseError> {
    let violation = |code, element: &str| Violation {
        code,
        element: element.to_string(),
    };
    match parse_workflow(text) {
        Ok(wf) => {
            let v = validate(&wf);
            Ok((Some(wf), v))
        }
        Err(ParseError::EmptyWorkflow) => Ok((None, vec![violation(ViolationCode::EmptyWorkflow, "nodes")])),
        Err(ParseError::DuplicateId { kind, id }) => {
            let code = match kind {
                "group" => ViolationCode::DuplicateGroup,
                "node" => ViolationCode::DuplicateNode,
                _ => ViolationCode::DuplicateUnit,
            };
            Ok((None, vec![violation(code, &id)]))
        }
        Err(ParseError::DanglingReference(id)) => Ok((None, vec![violation(ViolationCode::DanglingEdge, &id)])),
        Err(ParseError::InvalidParams { lambda, .. }) => {
            Ok((None, vec![violation(ViolationCode::InvalidLambdaParams, &lambda)]))
        }
        Err(e) => Err(e),
    }
}

/// Canonical document: keys sorted, arrays in declaration order, two-space
/// indentation, trailing newline.
pub fn serialize(workflow: &Workflow) -> String {
    let mut out = canonical_pretty(&to_value(workflow));
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn check_document_reports_parser_refusals_as_violations() {
        let doc: Value = serde_json::from_str(fixtures::BETWEEN_SUBJECTS_DOC).unwrap();
        let (wf, v) = check_document(fixtures::BETWEEN_SUBJECTS_DOC).unwrap();
        assert!(wf.is_some() && v.is_empty());

        let mut dup = doc.clone();
        dup["nodes"][1]["node_id"] = "cond_a".into();
        let (wf, v) = check_document(&dup.to_string()).unwrap();
        assert!(wf.is_none());
        assert_eq!(v[0].to_string(), "DUPLICATE_NODE(cond_a)");

        let mut dangling = doc.clone();
        dangling["edges"][0]["to"] = "ghost".into();
        assert_eq!(check_document(&dangling.to_string()).unwrap().1[0].code, ViolationCode::DanglingEdge);

        let mut cyclic = doc;
        cyclic["edges"][4] = serde_json::json!({ "from": "agg", "to": "cond_a", "lambda": { "name": "pass_through" } });
        let (wf, v) = check_document(&cyclic.to_string()).unwrap();
        assert!(wf.is_some());
        assert!(v.iter().any(|x| x.code == ViolationCode::Cycle));

        assert!(check_document("{").is_err());
    }

    #[test]
    fn figure_shaped_document_parses() {
        let wf = parse_workflow(fixtures::BETWEEN_SUBJECTS_DOC).unwrap();
        assert_eq!(wf.nodes.len(), 3);
        assert_eq!(wf.groups.len(), 2);
        assert_eq!(wf.edges.len(), 5);
        assert_eq!(wf.edges[0].lambda, LambdaSpec::BalancedSplit { n_outputs: 2 });
    }

    #[test]
    fn empty_nodes_rejected() {
        let doc = r#"{"workflow_id":"w","groups":[],"nodes":[],"edges":[],"input_units":[]}"#;
        let err = parse_workflow(doc).unwrap_err();
        assert_eq!(err, ParseError::EmptyWorkflow);
        assert_eq!(
            err.to_string(),
            "workflow must contain at least one task node"
        );
    }

    #[test]
    fn dangling_edge_names_target() {
        let doc = fixtures::BETWEEN_SUBJECTS_DOC.replace(r#""to": "agg""#, r#""to": "nodeX""#);
        let err = parse_workflow(&doc).unwrap_err();
        assert_eq!(err, ParseError::DanglingReference("nodeX".into()));
        assert!(err.to_string().contains("nodeX"));
    }

    #[test]
    fn syntax_error_carries_position() {
        let err = parse_workflow("{\n  \"workflow_id\": ,\n}").unwrap_err();
        match err {
            ParseError::Syntax { line, column, .. } => {
                assert_eq!(line, 2);
                assert!(column > 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_combinator_and_missing_field() {
        let doc = fixtures::BETWEEN_SUBJECTS_DOC.replace("majority_vote", "median_vote");
        assert_eq!(
            parse_workflow(&doc).unwrap_err(),
            ParseError::UnknownCombinator("median_vote".into())
        );
        let doc = r#"{"groups":[],"nodes":[],"edges":[],"input_units":[]}"#;
        assert!(matches!(
            parse_workflow(doc).unwrap_err(),
            ParseError::MissingField { ref field, .. } if field == "workflow_id"
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let doc = fixtures::BETWEEN_SUBJECTS_DOC.replace(r#""node_id": "cond_b""#, r#""node_id": "cond_a""#);
        assert!(matches!(
            parse_workflow(&doc).unwrap_err(),
            ParseError::DuplicateId { kind: "node", .. }
        ));
    }

    #[test]
    fn lambda_params_are_checked() {
        let doc = fixtures::BETWEEN_SUBJECTS_DOC.replace(r#""n_outputs": 2"#, r#""n_outputs": "two""#);
        assert!(matches!(
            parse_workflow(&doc).unwrap_err(),
            ParseError::InvalidParams { .. }
        ));
    }

    #[test]
    fn round_trip_is_identity_and_fixpoint() {
        let wf = parse_workflow(fixtures::BETWEEN_SUBJECTS_DOC).unwrap();
        let once = serialize(&wf);
        let back = parse_workflow(&once).unwrap();
        assert_eq!(back, wf);
        assert_eq!(serialize(&back), once);
    }

    #[test]
    fn unicode_instructions_preserved() {
        let mut wf = parse_workflow(fixtures::BETWEEN_SUBJECTS_DOC).unwrap();
        wf.nodes[0].instructions = "Léase el documento «¿es relevante?» 文書 🙂".into();
        let back = parse_workflow(&serialize(&wf)).unwrap();
        assert_eq!(
            back.nodes[0].instructions.as_bytes(),
            wf.nodes[0].instructions.as_bytes()
        );
    }

    #[test]
    fn canonical_output_sorts_keys() {
        let text = serialize(&parse_workflow(fixtures::BETWEEN_SUBJECTS_DOC).unwrap());
        let edges = text.find("\"edges\"").unwrap();
        let groups = text.find("\"groups\"").unwrap();
        let input = text.find("\"input_units\"").unwrap();
        assert!(edges < groups && groups < input);
        assert!(text.starts_with("{\n  \""));
    }
}
