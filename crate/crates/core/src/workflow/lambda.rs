use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{DataUnit, LambdaSpec, Scalar};

/// Sentinel answer written by `majority_vote` when no answer has a strict plurality.
pub const UNRESOLVED: &str = "UNRESOLVED";
/// Payload field that carries the aggregated answer downstream.
pub const MAJORITY_FIELD: &str = "majority_answer";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub worker: String,
    pub answer: String,
}

/// A unit in flight along an edge, with the judgments it collected at the
/// node it just left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub unit: DataUnit,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub judgments: Vec<Vote>,
}

impl Item {
    pub fn new(unit: DataUnit) -> Self {
        Self {
            unit,
            judgments: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Collection {
    pub label: String,
    pub items: Vec<Item>,
}

impl Collection {
    pub fn new(label: impl Into<String>, items: Vec<Item>) -> Self {
        Self {
            label: label.into(),
            items,
        }
    }

    pub fn unit_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.unit.unit_id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LambdaError {
    #[error("`{lambda}` expects {expected} input(s), got {got}")]
    Arity {
        lambda: &'static str,
        expected: &'static str,
        got: usize,
    },
    #[error("unit `{unit_id}` has no field `{key}`")]
    MissingKey { unit_id: String, key: String },
    #[error("invalid params for `{lambda}`: {message}")]
    InvalidParams {
        lambda: &'static str,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MajorityOutcome {
    Resolved(String),
    Unresolved,
}

impl MajorityOutcome {
    pub fn as_answer(&self) -> &str {
        match self {
            MajorityOutcome::Resolved(a) => a,
            MajorityOutcome::Unresolved => UNRESOLVED,
        }
    }
}

/// Strict-plurality vote. Ties at the top (and empty input) are unresolved.
pub fn majority<'a>(answers: impl IntoIterator<Item = &'a str>) -> MajorityOutcome {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(a).or_default() += 1;
    }
    let mut best: Option<(&str, usize)> = None;
    let mut tied = false;
    for (answer, n) in counts {
        match best {
            Some((_, top)) if n == top => tied = true,
            Some((_, top)) if n < top => {}
            _ => {
                best = Some((answer, n));
                tied = false;
            }
        }
    }
    match best {
        Some((answer, _)) if !tied => MajorityOutcome::Resolved(answer.to_string()),
        _ => MajorityOutcome::Unresolved,
    }
}

fn single<'a>(lambda: &'static str, inputs: &'a [Collection]) -> Result<&'a Collection, LambdaError> {
    match inputs {
        [one] => Ok(one),
        _ => Err(LambdaError::Arity {
            lambda,
            expected: "exactly 1",
            got: inputs.len(),
        }),
    }
}

fn field<'a>(item: &'a Item, key: &str) -> Result<&'a Scalar, LambdaError> {
    item.unit
        .payload
        .get(key)
        .ok_or_else(|| LambdaError::MissingKey {
            unit_id: item.unit.unit_id.clone(),
            key: key.to_string(),
        })
}

/// Evaluates one combinator over labeled input collections.
///
/// Output shapes: `balanced_split(n)` yields `n` collections labeled
/// `part-0..part-{n-1}`; `partition_by_key` yields one collection per distinct
/// key value in ascending order of the value's text form; every other
/// combinator yields exactly one collection.
pub fn apply_lambda(spec: &LambdaSpec, inputs: &[Collection]) -> Result<Vec<Collection>, LambdaError> {
    let name = spec.name();
    match spec {
        LambdaSpec::PassThrough => Ok(vec![single(name, inputs)?.clone()]),
        LambdaSpec::Union => {
            if inputs.is_empty() {
                return Err(LambdaError::Arity {
                    lambda: name,
                    expected: "at least 1",
                    got: 0,
                });
            }
            let mut seen = BTreeSet::new();
            let items = inputs
                .iter()
                .flat_map(|c| c.items.iter())
                .filter(|i| seen.insert(i.unit.unit_id.clone()))
                .cloned()
                .collect();
            let label = inputs
                .iter()
                .map(|c| c.label.as_str())
                .collect::<Vec<_>>()
                .join("+");
            Ok(vec![Collection::new(label, items)])
        }
        LambdaSpec::BalancedSplit { n_outputs } => {
            let input = single(name, inputs)?;
            let n = *n_outputs as usize;
            if n == 0 {
                return Err(LambdaError::InvalidParams {
                    lambda: name,
                    message: "n_outputs must be positive".into(),
                });
            }
            let mut sorted: Vec<&Item> = input.items.iter().collect();
            sorted.sort_by(|a, b| a.unit.unit_id.cmp(&b.unit.unit_id));
            let mut parts: Vec<Collection> = (0..n)
                .map(|i| Collection::new(format!("part-{i}"), Vec::new()))
                .collect();
            for (i, item) in sorted.into_iter().enumerate() {
                parts[i % n].items.push(item.clone());
            }
            Ok(parts)
        }
        LambdaSpec::PartitionByKey { key } => {
            let input = single(name, inputs)?;
            let mut parts: BTreeMap<String, Vec<Item>> = BTreeMap::new();
            for item in &input.items {
                let value = field(item, key)?.key_string();
                parts.entry(value).or_default().push(item.clone());
            }
            Ok(parts
                .into_iter()
                .map(|(label, items)| Collection::new(label, items))
                .collect())
        }
        LambdaSpec::FilterByField { key, values } => {
            let input = single(name, inputs)?;
            let mut items = Vec::new();
            for item in &input.items {
                if values.contains(field(item, key)?) {
                    items.push(item.clone());
                }
            }
            Ok(vec![Collection::new(input.label.clone(), items)])
        }
        LambdaSpec::MajorityVote => {
            let input = single(name, inputs)?;
            let items = input
                .items
                .iter()
                .map(|item| {
                    let outcome = majority(item.judgments.iter().map(|v| v.answer.as_str()));
                    let mut unit = item.unit.clone();
                    unit.payload.insert(
                        MAJORITY_FIELD.to_string(),
                        Scalar::Str(outcome.as_answer().to_string()),
                    );
                    Item::new(unit)
                })
                .collect();
            Ok(vec![Collection::new(input.label.clone(), items)])
        }
    }
}
