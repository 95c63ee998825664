//! Worker identity and admission policy.
//!
//! Observations of a worker (adapter id, platform worker id, fingerprint) are
//! folded into canonical identities by [`WorkerRegistry`]. The
//! [`ParticipationLedger`] keeps each identity's history within a run, and
//! [`decide`] turns that history into an allow/deny verdict for a given
//! [`EligibilityPolicy`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::workflow::{TaskNode, Workflow};
use crate::Timestamp;

pub type WorkerId = String;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub canonical_id: WorkerId,
    /// `(adapter_name, platform_worker_id)` pairs.
    pub platform_ids: BTreeSet<(String, String)>,
    pub fingerprints: BTreeSet<String>,
    pub country: String,
    pub trust: f64,
    pub first_seen: Timestamp,
}

/// Outcome of [`WorkerRegistry::resolve`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    pub canonical_id: WorkerId,
    pub created: bool,
    /// Set when the observation tied two existing identities together:
    /// `(absorbed, survivor)`.
    pub merged: Option<(WorkerId, WorkerId)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerRegistry {
    records: BTreeMap<WorkerId, WorkerRecord>,
    by_platform: BTreeMap<String, WorkerId>,
    by_fingerprint: BTreeMap<String, WorkerId>,
    /// Absorbed identity -> survivor. Chains are collapsed on merge.
    aliases: BTreeMap<WorkerId, WorkerId>,
    next_id: u64,
}

fn platform_key(adapter: &str, platform_id: &str) -> String {
    format!("{adapter}\u{1f}{platform_id}")
}

impl WorkerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Follows merge aliases to the surviving identity.
    pub fn canonical<'a>(&'a self, id: &'a str) -> &'a str {
        self.aliases.get(id).map(String::as_str).unwrap_or(id)
    }

    pub fn get(&self, id: &str) -> Option<&WorkerRecord> {
        self.records.get(self.canonical(id))
    }

    pub fn records(&self) -> impl Iterator<Item = &WorkerRecord> {
        self.records.values()
    }

    /// What [`resolve`](Self::resolve) would return, without recording
    /// anything.
    pub fn preview(&self, adapter: &str, platform_id: &str, fingerprint: Option<&str>) -> Resolution {
        let by_pid = self.by_platform.get(&platform_key(adapter, platform_id));
        let by_fp = fingerprint.and_then(|fp| self.by_fingerprint.get(fp));
        match (by_pid, by_fp) {
            (Some(x), Some(y)) if x != y => Resolution {
                canonical_id: x.clone(),
                created: false,
                merged: Some((y.clone(), x.clone())),
            },
            (Some(x), _) | (None, Some(x)) => Resolution {
                canonical_id: x.clone(),
                created: false,
                merged: None,
            },
            (None, None) => Resolution {
                canonical_id: format!("w{:06}", self.next_id + 1),
                created: true,
                merged: None,
            },
        }
    }

    /// Maps an observation onto a canonical identity.
    ///
    /// A platform-id match wins over a fingerprint match. When the platform id
    /// points at one record and the fingerprint at another, the fingerprint's
    /// record is merged into the platform id's record.
    pub fn resolve(
        &mut self,
        adapter: &str,
        platform_id: &str,
        fingerprint: Option<&str>,
        country: &str,
        trust: f64,
        now: Timestamp,
    ) -> Resolution {
        let pkey = platform_key(adapter, platform_id);
        let by_pid = self.by_platform.get(&pkey).cloned();
        let by_fp = fingerprint.and_then(|fp| self.by_fingerprint.get(fp).cloned());

        let (id, created, merged) = match (by_pid, by_fp) {
            (Some(x), Some(y)) if x != y => {
                self.merge(&y, &x);
                (x.clone(), false, Some((y, x)))
            }
            (Some(x), _) => (x, false, None),
            (None, Some(y)) => (y, false, None),
            (None, None) => {
                self.next_id += 1;
                let id = format!("w{:06}", self.next_id);
                self.records.insert(
                    id.clone(),
                    WorkerRecord {
                        canonical_id: id.clone(),
                        platform_ids: BTreeSet::new(),
                        fingerprints: BTreeSet::new(),
                        country: country.to_string(),
                        trust,
                        first_seen: now,
                    },
                );
                (id, true, None)
            }
        };

        let record = self.records.get_mut(&id).expect("resolved id has a record");
        record
            .platform_ids
            .insert((adapter.to_string(), platform_id.to_string()));
        record.country = country.to_string();
        record.trust = trust;
        self.by_platform.insert(pkey, id.clone());
        if let Some(fp) = fingerprint {
            record.fingerprints.insert(fp.to_string());
            self.by_fingerprint.insert(fp.to_string(), id.clone());
        }
        Resolution {
            canonical_id: id,
            created,
            merged,
        }
    }

    fn merge(&mut self, absorbed: &str, survivor: &str) {
        let gone = self.records.remove(absorbed).expect("absorbed record exists");
        for (adapter, pid) in &gone.platform_ids {
            self.by_platform
                .insert(platform_key(adapter, pid), survivor.to_string());
        }
        for fp in &gone.fingerprints {
            self.by_fingerprint.insert(fp.clone(), survivor.to_string());
        }
        for target in self.aliases.values_mut() {
            if target == absorbed {
                *target = survivor.to_string();
            }
        }
        self.aliases.insert(absorbed.to_string(), survivor.to_string());
        let keep = self.records.get_mut(survivor).expect("survivor record exists");
        keep.platform_ids.extend(gone.platform_ids);
        keep.fingerprints.extend(gone.fingerprints);
        keep.first_seen = keep.first_seen.min(gone.first_seen);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParticipationEntry {
    pub node_id: String,
    pub group_id: String,
    pub run_id: String,
    pub first_judgment_time: Timestamp,
    pub judgment_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("worker {worker} has no admission for node {node_id} in run {run_id}")]
    NotAdmitted {
        worker: WorkerId,
        node_id: String,
        run_id: String,
    },
}

/// Per-identity participation history. Entries only ever grow.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParticipationLedger {
    entries: BTreeMap<WorkerId, Vec<ParticipationEntry>>,
    /// Admissions granted, keyed by worker: `(run_id, node_id, group_id)`.
    /// They count as exposure before the first judgment lands.
    grants: BTreeMap<WorkerId, BTreeSet<(String, String, String)>>,
}

impl ParticipationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self, worker: &str) -> &[ParticipationEntry] {
        self.entries.get(worker).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn workers(&self) -> impl Iterator<Item = (&WorkerId, &Vec<ParticipationEntry>)> {
        self.entries.iter()
    }

    pub fn grant(&mut self, worker: &str, node_id: &str, group_id: &str, run_id: &str) {
        self.grants.entry(worker.to_string()).or_default().insert((
            run_id.to_string(),
            node_id.to_string(),
            group_id.to_string(),
        ));
    }

    pub fn is_granted(&self, worker: &str, node_id: &str, run_id: &str) -> bool {
        self.grants
            .get(worker)
            .is_some_and(|g| g.iter().any(|(r, n, _)| r == run_id && n == node_id))
    }

    /// Records one judgment. Appends a new entry for the first judgment on a
    /// node, otherwise increments the existing one.
    pub fn record_participation(
        &mut self,
        worker: &str,
        node_id: &str,
        group_id: &str,
        run_id: &str,
        time: Timestamp,
    ) -> Result<&ParticipationEntry, LedgerError> {
        if !self.is_granted(worker, node_id, run_id) {
            return Err(LedgerError::NotAdmitted {
                worker: worker.to_string(),
                node_id: node_id.to_string(),
                run_id: run_id.to_string(),
            });
        }
        let list = self.entries.entry(worker.to_string()).or_default();
        let pos = match list
            .iter()
            .position(|e| e.node_id == node_id && e.run_id == run_id)
        {
            Some(pos) => {
                list[pos].judgment_count += 1;
                pos
            }
            None => {
                list.push(ParticipationEntry {
                    node_id: node_id.to_string(),
                    group_id: group_id.to_string(),
                    run_id: run_id.to_string(),
                    first_judgment_time: time,
                    judgment_count: 1,
                });
                list.len() - 1
            }
        };
        Ok(&list[pos])
    }

    /// Moves an absorbed identity's history onto its survivor.
    pub fn merge(&mut self, absorbed: &str, survivor: &str) {
        if let Some(moved) = self.entries.remove(absorbed) {
            let list = self.entries.entry(survivor.to_string()).or_default();
            for entry in moved {
                match list
                    .iter_mut()
                    .find(|e| e.node_id == entry.node_id && e.run_id == entry.run_id)
                {
                    Some(existing) => {
                        existing.judgment_count += entry.judgment_count;
                        existing.first_judgment_time =
                            existing.first_judgment_time.min(entry.first_judgment_time);
                    }
                    None => list.push(entry),
                }
            }
            list.sort_by(|a, b| a.first_judgment_time.cmp(&b.first_judgment_time));
        }
        if let Some(moved) = self.grants.remove(absorbed) {
            self.grants.entry(survivor.to_string()).or_default().extend(moved);
        }
    }

    fn exposure(&self, worker: &str, run_id: &str) -> Vec<(&str, &str)> {
        let mut seen: BTreeSet<(&str, &str)> = self
            .entries(worker)
            .iter()
            .filter(|e| e.run_id == run_id)
            .map(|e| (e.node_id.as_str(), e.group_id.as_str()))
            .collect();
        if let Some(grants) = self.grants.get(worker) {
            seen.extend(
                grants
                    .iter()
                    .filter(|(r, _, _)| r == run_id)
                    .map(|(_, n, g)| (n.as_str(), g.as_str())),
            );
        }
        seen.into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Design {
    Open,
    BetweenSubjects,
    WithinSubjects,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReturningRule {
    DenyAllReturning,
    AllowSameTask,
    AllowSameGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPolicy")]
pub struct EligibilityPolicy {
    pub design: Design,
    pub returning_rule: ReturningRule,
}

#[derive(Deserialize)]
struct RawPolicy {
    design: Design,
    returning_rule: ReturningRule,
}

impl TryFrom<RawPolicy> for EligibilityPolicy {
    type Error = PolicyError;

    fn try_from(raw: RawPolicy) -> Result<Self, PolicyError> {
        EligibilityPolicy::new(raw.design, raw.returning_rule)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("within-subjects designs cannot deny all returning workers")]
pub struct PolicyError;

impl EligibilityPolicy {
    pub fn new(design: Design, returning_rule: ReturningRule) -> Result<Self, PolicyError> {
        if design == Design::WithinSubjects && returning_rule == ReturningRule::DenyAllReturning {
            return Err(PolicyError);
        }
        Ok(Self {
            design,
            returning_rule,
        })
    }

    pub fn open() -> Self {
        Self {
            design: Design::Open,
            returning_rule: ReturningRule::AllowSameGroup,
        }
    }

    pub fn between_subjects(returning_rule: ReturningRule) -> Self {
        Self {
            design: Design::BetweenSubjects,
            returning_rule,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Allow,
    Deny,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DecisionReason {
    NewWorker,
    ReturningPermitted,
    DenyReturning,
    DenyCrossover,
    DenyCompletedAll,
    DenyPopulationFilter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibilityDecision {
    pub verdict: Verdict,
    pub reason: DecisionReason,
}

impl EligibilityDecision {
    fn allow(reason: DecisionReason) -> Self {
        Self {
            verdict: Verdict::Allow,
            reason,
        }
    }

    fn deny(reason: DecisionReason) -> Self {
        Self {
            verdict: Verdict::Deny,
            reason,
        }
    }

    pub fn is_allow(&self) -> bool {
        self.verdict == Verdict::Allow
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EligibilityError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("unknown worker `{0}`")]
    UnknownWorker(String),
}

/// The pure decision rule. `run_groups` is the set of groups that have at
/// least one node in the run's workflow.
pub fn decide(
    worker: &WorkerRecord,
    node: &TaskNode,
    policy: &EligibilityPolicy,
    ledger: &ParticipationLedger,
    run_id: &str,
    run_groups: &BTreeSet<String>,
) -> EligibilityDecision {
    use DecisionReason::*;
    if let Some(filter) = &node.population_filter {
        if !filter.admits(&worker.country, worker.trust) {
            return EligibilityDecision::deny(DenyPopulationFilter);
        }
    }
    let history = ledger.exposure(&worker.canonical_id, run_id);
    let fresh = if history.is_empty() {
        NewWorker
    } else {
        ReturningPermitted
    };
    match policy.design {
        Design::Open => EligibilityDecision::allow(fresh),
        Design::BetweenSubjects => {
            if history.is_empty() {
                return EligibilityDecision::allow(NewWorker);
            }
            if history.iter().any(|(_, g)| *g != node.group_id) {
                return EligibilityDecision::deny(DenyCrossover);
            }
            let permitted = match policy.returning_rule {
                ReturningRule::DenyAllReturning => false,
                ReturningRule::AllowSameTask => history.iter().all(|(n, _)| *n == node.node_id),
                ReturningRule::AllowSameGroup => true,
            };
            if permitted {
                EligibilityDecision::allow(ReturningPermitted)
            } else {
                EligibilityDecision::deny(DenyReturning)
            }
        }
        Design::WithinSubjects => {
            let completed: BTreeSet<&str> = ledger
                .entries(&worker.canonical_id)
                .iter()
                .filter(|e| e.run_id == run_id && e.judgment_count > 0)
                .map(|e| e.group_id.as_str())
                .collect();
            if !completed.contains(node.group_id.as_str()) {
                EligibilityDecision::allow(fresh)
            } else if run_groups.iter().all(|g| completed.contains(g.as_str())) {
                EligibilityDecision::deny(DenyCompletedAll)
            } else {
                EligibilityDecision::deny(DenyReturning)
            }
        }
    }
}

/// Looks up the worker and node, then applies [`decide`].
pub fn check_eligibility(
    registry: &WorkerRegistry,
    worker: &str,
    workflow: &Workflow,
    node_id: &str,
    policy: &EligibilityPolicy,
    ledger: &ParticipationLedger,
    run_id: &str,
) -> Result<EligibilityDecision, EligibilityError> {
    let record = registry
        .get(worker)
        .ok_or_else(|| EligibilityError::UnknownWorker(worker.to_string()))?;
    let node = workflow
        .node(node_id)
        .ok_or_else(|| EligibilityError::UnknownNode(node_id.to_string()))?;
    let groups = workflow.nodes.iter().map(|n| n.group_id.clone()).collect();
    Ok(decide(record, node, policy, ledger, run_id, &groups))
}
