//! Bias metrics over one or more run logs.
//!
//! Worker identity is re-resolved across the whole log set, so a person seen
//! in two runs counts as returning in the second. A participation entry is a
//! distinct `(run, node)` pair in which the worker left at least one judgment.

mod render;

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::eligibility::WorkerRegistry;
use crate::geo::local_hour;
use crate::orchestrator::{EventBody, RunEvent};
use crate::Timestamp;

pub use render::{render_document, render_table, TableRow};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnalyticsError {
    #[error("EMPTY_LOG: no judgments to analyze")]
    EmptyLog,
    #[error("log {0} does not start with DEPLOYED")]
    NotDeployed(usize),
    #[error("attribute `{0}` is not recorded on judgments")]
    UnknownAttribute(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerClass {
    New,
    ReturningSame,
    ReturningCrossed,
}

impl WorkerClass {
    pub const ALL: [WorkerClass; 3] = [WorkerClass::New, WorkerClass::ReturningSame, WorkerClass::ReturningCrossed];

    pub fn as_str(self) -> &'static str {
        match self {
            WorkerClass::New => "new",
            WorkerClass::ReturningSame => "returning_same",
            WorkerClass::ReturningCrossed => "returning_crossed",
        }
    }
}

/// Direction of a crossover between groups that carry a support flag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Switch {
    SupportToNoSupport,
    NoSupportToSupport,
    SameSupport,
}

impl Switch {
    pub fn as_str(self) -> &'static str {
        match self {
            Switch::SupportToNoSupport => "support_to_no_support",
            Switch::NoSupportToSupport => "no_support_to_support",
            Switch::SameSupport => "same_support",
        }
    }
}

/// One accepted judgment with its worker resolved across the log set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JudgmentRecord {
    pub log: usize,
    pub seq: u64,
    pub time: Timestamp,
    pub worker: String,
    pub node_id: String,
    pub group_id: String,
    pub country: String,
    pub answer: String,
    pub decision_time_seconds: f64,
    pub gold_correct: Option<bool>,
    pub grace: bool,
    pub class: WorkerClass,
    pub switch: Option<Switch>,
}

struct Meta {
    adapter: String,
    labels: BTreeMap<String, String>,
    support: BTreeMap<String, Option<bool>>,
}

fn metas(logs: &[Vec<RunEvent>]) -> Result<Vec<Meta>, AnalyticsError> {
    logs.iter()
        .enumerate()
        .map(|(i, log)| match log.first().map(|e| &e.body) {
            Some(EventBody::Deployed(cfg)) => Ok(Meta {
                adapter: cfg.adapter.clone(),
                labels: cfg
                    .workflow
                    .groups
                    .iter()
                    .map(|g| (g.group_id.clone(), g.label.clone()))
                    .collect(),
                support: cfg
                    .workflow
                    .groups
                    .iter()
                    .map(|g| (g.group_id.clone(), g.support))
                    .collect(),
            }),
            _ => Err(AnalyticsError::NotDeployed(i)),
        })
        .collect()
}

/// Extracts every accepted judgment, ordered by time, and classifies it by
/// the worker's earlier participation entries.
pub fn judgments(logs: &[Vec<RunEvent>]) -> Result<Vec<JudgmentRecord>, AnalyticsError> {
    let metas = metas(logs)?;
    let mut arrivals = Vec::new();
    let mut raw = Vec::new();
    for (i, log) in logs.iter().enumerate() {
        for ev in log {
            match &ev.body {
                EventBody::WorkerArrival { .. } => arrivals.push((ev.time, i, ev)),
                EventBody::Judgment { .. } => raw.push((ev.time, i, ev)),
                _ => {}
            }
        }
    }
    arrivals.sort_by_key(|(t, i, ev)| (*t, *i, ev.seq));
    raw.sort_by_key(|(t, i, ev)| (*t, *i, ev.seq));

    let mut registry = WorkerRegistry::new();
    for (t, i, ev) in &arrivals {
        if let EventBody::WorkerArrival {
            platform_worker,
            fingerprint,
            country,
            trust,
            ..
        } = &ev.body
        {
            registry.resolve(&metas[*i].adapter, platform_worker, fingerprint.as_deref(), country, *trust, *t);
        }
    }

    // per worker: entries (log, node, group) in order of first judgment
    let mut entries: BTreeMap<String, Vec<(usize, String, String)>> = BTreeMap::new();
    let mut out = Vec::with_capacity(raw.len());
    for (t, i, ev) in raw {
        let EventBody::Judgment {
            node_id,
            group_id,
            platform_worker,
            answer,
            decision_time_seconds,
            country,
            grace,
            gold_correct,
            ..
        } = &ev.body
        else {
            continue;
        };
        let id = registry
            .preview(&metas[i].adapter, platform_worker, None)
            .canonical_id;
        let worker = registry.canonical(&id).to_string();
        let list = entries.entry(worker.clone()).or_default();
        let pos = match list.iter().position(|(l, n, _)| *l == i && n == node_id) {
            Some(p) => p,
            None => {
                list.push((i, node_id.clone(), group_id.clone()));
                list.len() - 1
            }
        };
        let prior = &list[..pos];
        let crossed_from = prior.iter().rev().find(|(_, _, g)| g != group_id);
        let class = if prior.is_empty() {
            WorkerClass::New
        } else if crossed_from.is_some() {
            WorkerClass::ReturningCrossed
        } else {
            WorkerClass::ReturningSame
        };
        let switch = crossed_from.and_then(|(l, _, g)| {
            let from = metas[*l].support.get(g).copied().flatten()?;
            let to = metas[i].support.get(group_id).copied().flatten()?;
            Some(match (from, to) {
                (true, false) => Switch::SupportToNoSupport,
                (false, true) => Switch::NoSupportToSupport,
                _ => Switch::SameSupport,
            })
        });
        out.push(JudgmentRecord {
            log: i,
            seq: ev.seq,
            time: t,
            worker,
            node_id: node_id.clone(),
            group_id: group_id.clone(),
            country: country.clone(),
            answer: answer.clone(),
            decision_time_seconds: *decision_time_seconds,
            gold_correct: *gold_correct,
            grace: *grace,
            class,
            switch,
        });
    }
    Ok(out)
}

fn nonempty(records: &[JudgmentRecord]) -> Result<(), AnalyticsError> {
    if records.is_empty() {
        Err(AnalyticsError::EmptyLog)
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkerSummary {
    pub workers: usize,
    pub returning: usize,
    pub crossed: usize,
}

pub fn worker_summary(records: &[JudgmentRecord]) -> Result<WorkerSummary, AnalyticsError> {
    nonempty(records)?;
    let mut entries: BTreeMap<&str, BTreeSet<(usize, &str)>> = BTreeMap::new();
    let mut groups: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in records {
        entries.entry(&r.worker).or_default().insert((r.log, &r.node_id));
        groups.entry(&r.worker).or_default().insert(&r.group_id);
    }
    Ok(WorkerSummary {
        workers: entries.len(),
        returning: entries.values().filter(|e| e.len() > 1).count(),
        crossed: groups.values().filter(|g| g.len() > 1).count(),
    })
}

/// Share of workers with more than one participation entry.
pub fn returning_rate(logs: &[Vec<RunEvent>]) -> Result<f64, AnalyticsError> {
    let s = worker_summary(&judgments(logs)?)?;
    Ok(s.returning as f64 / s.workers as f64)
}

/// Share of workers with entries in at least two groups.
pub fn crossover_rate(logs: &[Vec<RunEvent>]) -> Result<f64, AnalyticsError> {
    let s = worker_summary(&judgments(logs)?)?;
    Ok(s.crossed as f64 / s.workers as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Concentration {
    pub attribute: String,
    /// Descending by share, ties by value.
    pub shares: Vec<(String, f64)>,
    pub counts: Vec<(String, u64)>,
    pub top_3_share: f64,
    pub hhi: f64,
}

impl Concentration {
    pub fn top_k_share(&self, k: usize) -> f64 {
        self.shares.iter().take(k).map(|(_, s)| s).sum()
    }

    pub fn max_share(&self) -> f64 {
        self.shares.first().map(|(_, s)| *s).unwrap_or(0.0)
    }
}

fn attribute_of<'a>(r: &'a JudgmentRecord, attribute: &str) -> Option<&'a str> {
    Some(match attribute {
        "country" => &r.country,
        "group_id" => &r.group_id,
        "node_id" => &r.node_id,
        "answer" => &r.answer,
        _ => return None,
    })
}

/// Judgment shares per attribute value.
pub fn concentration_of(records: &[JudgmentRecord], attribute: &str) -> Result<Concentration, AnalyticsError> {
    nonempty(records)?;
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for r in records {
        let v = attribute_of(r, attribute).ok_or_else(|| AnalyticsError::UnknownAttribute(attribute.into()))?;
        *counts.entry(v).or_default() += 1;
    }
    let mut counts: Vec<(String, u64)> = counts.into_iter().map(|(k, n)| (k.to_string(), n)).collect();
    counts.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let total = records.len() as f64;
    let shares: Vec<(String, f64)> = counts.iter().map(|(k, n)| (k.clone(), *n as f64 / total)).collect();
    let hhi = shares.iter().map(|(_, s)| s * s).sum();
    let mut c = Concentration {
        attribute: attribute.to_string(),
        shares,
        counts,
        top_3_share: 0.0,
        hhi,
    };
    c.top_3_share = c.top_k_share(3);
    Ok(c)
}

pub fn concentration(logs: &[Vec<RunEvent>], attribute: &str) -> Result<Concentration, AnalyticsError> {
    concentration_of(&judgments(logs)?, attribute)
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub(crate) fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Sample standard deviation; `None` below two observations.
pub(crate) fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStats {
    pub class: String,
    pub count: usize,
    pub mean_time: Option<f64>,
    pub median_time: Option<f64>,
    pub gold_count: usize,
    pub accuracy: Option<f64>,
    pub z_time: Option<f64>,
    pub z_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionStats {
    pub group_id: String,
    pub label: String,
    pub count: usize,
    pub mean_time: f64,
    pub median_time: f64,
    pub gold_count: usize,
    pub accuracy: Option<f64>,
    /// Set when the new-worker time baseline has fewer than two judgments or
    /// no spread; time z-scores are then omitted.
    pub degenerate_baseline: bool,
    pub classes: Vec<ClassStats>,
    /// Crossed judgments broken down by support direction, when groups carry
    /// a support flag.
    pub switches: Vec<ClassStats>,
}

struct Baseline {
    time: Option<(f64, f64)>,
    accuracy: Option<(f64, f64)>,
}

fn baseline(new: &[&JudgmentRecord]) -> Baseline {
    let times: Vec<f64> = new.iter().map(|r| r.decision_time_seconds).collect();
    let gold: Vec<f64> = new
        .iter()
        .filter_map(|r| r.gold_correct.map(|c| if c { 1.0 } else { 0.0 }))
        .collect();
    let spread = |xs: &[f64]| sample_std(xs).filter(|s| *s > 0.0).map(|s| (mean(xs), s));
    Baseline {
        time: spread(&times),
        accuracy: spread(&gold),
    }
}

fn class_stats(label: &str, rs: &[&JudgmentRecord], base: &Baseline) -> ClassStats {
    let times: Vec<f64> = rs.iter().map(|r| r.decision_time_seconds).collect();
    let gold: Vec<f64> = rs
        .iter()
        .filter_map(|r| r.gold_correct.map(|c| if c { 1.0 } else { 0.0 }))
        .collect();
    let mean_time = (!times.is_empty()).then(|| mean(&times));
    let accuracy = (!gold.is_empty()).then(|| mean(&gold));
    ClassStats {
        class: label.to_string(),
        count: rs.len(),
        mean_time,
        median_time: (!times.is_empty()).then(|| median(&times)),
        gold_count: gold.len(),
        accuracy,
        z_time: mean_time.zip(base.time).map(|(m, (m0, s))| (m - m0) / s),
        z_accuracy: accuracy.zip(base.accuracy).map(|(a, (a0, s))| (a - a0) / s),
    }
}

/// Per-group statistics with every worker class z-scored against the
/// group's new-worker judgments.
pub fn condition_stats(records: &[JudgmentRecord], labels: &BTreeMap<String, String>) -> Vec<ConditionStats> {
    let mut by_group: BTreeMap<&str, Vec<&JudgmentRecord>> = BTreeMap::new();
    for r in records {
        by_group.entry(&r.group_id).or_default().push(r);
    }
    by_group
        .into_iter()
        .map(|(g, rs)| {
            let new: Vec<&JudgmentRecord> = rs.iter().copied().filter(|r| r.class == WorkerClass::New).collect();
            let base = baseline(&new);
            let all = class_stats("all", &rs, &base);
            let classes = WorkerClass::ALL
                .iter()
                .map(|c| {
                    let sel: Vec<&JudgmentRecord> = rs.iter().copied().filter(|r| r.class == *c).collect();
                    class_stats(c.as_str(), &sel, &base)
                })
                .collect();
            let mut switches: BTreeMap<Switch, Vec<&JudgmentRecord>> = BTreeMap::new();
            for r in &rs {
                if let Some(s) = r.switch {
                    switches.entry(s).or_default().push(r);
                }
            }
            ConditionStats {
                group_id: g.to_string(),
                label: labels.get(g).cloned().unwrap_or_default(),
                count: rs.len(),
                mean_time: all.mean_time.unwrap_or(0.0),
                median_time: all.median_time.unwrap_or(0.0),
                gold_count: all.gold_count,
                accuracy: all.accuracy,
                degenerate_baseline: base.time.is_none(),
                classes,
                switches: switches
                    .into_iter()
                    .map(|(s, v)| class_stats(s.as_str(), &v, &base))
                    .collect(),
            }
        })
        .collect()
}

pub fn normalized_condition_stats(logs: &[Vec<RunEvent>]) -> Result<Vec<ConditionStats>, AnalyticsError> {
    let records = judgments(logs)?;
    nonempty(&records)?;
    Ok(condition_stats(&records, &labels(logs)?))
}

fn labels(logs: &[Vec<RunEvent>]) -> Result<BTreeMap<String, String>, AnalyticsError> {
    Ok(metas(logs)?.into_iter().flat_map(|m| m.labels).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CircularHours {
    pub n: usize,
    /// In [0, 24).
    pub mean_hour: f64,
    /// One minus the mean resultant length, in [0, 1].
    pub variance: f64,
}

/// Circular mean and variance of hours of the day.
pub fn circular_hours(hours: &[f64]) -> Option<CircularHours> {
    if hours.is_empty() {
        return None;
    }
    let n = hours.len() as f64;
    let (s, c) = hours.iter().fold((0.0, 0.0), |(s, c), h| {
        let a = 2.0 * PI * h / 24.0;
        (s + a.sin(), c + a.cos())
    });
    let (s, c) = (s / n, c / n);
    let r = (s * s + c * c).sqrt().min(1.0);
    Some(CircularHours {
        n: hours.len(),
        mean_hour: (s.atan2(c) * 24.0 / (2.0 * PI)).rem_euclid(24.0),
        variance: (1.0 - r).max(0.0),
    })
}

/// Distance between two hours on the 24h circle.
pub fn hour_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(24.0);
    d.min(24.0 - d)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimezoneBalance {
    pub per_group: Vec<(String, CircularHours)>,
    pub max_mean_difference: f64,
}

pub fn timezone_balance_of(records: &[JudgmentRecord]) -> Result<TimezoneBalance, AnalyticsError> {
    nonempty(records)?;
    let mut by_group: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records {
        by_group
            .entry(&r.group_id)
            .or_default()
            .push(local_hour(&r.time, &r.country));
    }
    let per_group: Vec<(String, CircularHours)> = by_group
        .into_iter()
        .filter_map(|(g, h)| circular_hours(&h).map(|c| (g.to_string(), c)))
        .collect();
    let mut max = 0.0f64;
    for (i, (_, a)) in per_group.iter().enumerate() {
        for (_, b) in &per_group[i + 1..] {
            max = max.max(hour_distance(a.mean_hour, b.mean_hour));
        }
    }
    Ok(TimezoneBalance {
        per_group,
        max_mean_difference: max,
    })
}

pub fn timezone_balance(logs: &[Vec<RunEvent>]) -> Result<TimezoneBalance, AnalyticsError> {
    timezone_balance_of(&judgments(logs)?)
}

/// Returning versus new judgments pooled over all groups, with a one-sided
/// sign test of returning decision times against the new-worker median.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReturningEffect {
    pub new_count: usize,
    pub returning_count: usize,
    pub new_median_time: f64,
    pub returning_median_time: f64,
    /// Returning judgments faster than the new-worker median.
    pub below: u64,
    /// Returning judgments not tied with the new-worker median.
    pub untied: u64,
    pub p_value: f64,
    pub new_accuracy: Option<f64>,
    pub returning_accuracy: Option<f64>,
}

/// P(X >= k) for X ~ Binomial(n, 1/2).
pub fn sign_test_upper(k: u64, n: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if n == 0 || k > n {
        return 0.0;
    }
    let b = Binomial::new(0.5, n).expect("valid binomial");
    b.sf(k - 1)
}

pub fn returning_effect_of(records: &[JudgmentRecord]) -> Result<ReturningEffect, AnalyticsError> {
    let (new, ret): (Vec<&JudgmentRecord>, Vec<&JudgmentRecord>) =
        records.iter().partition(|r| r.class == WorkerClass::New);
    if new.is_empty() || ret.is_empty() {
        return Err(AnalyticsError::EmptyLog);
    }
    let times = |v: &[&JudgmentRecord]| v.iter().map(|r| r.decision_time_seconds).collect::<Vec<_>>();
    let acc = |v: &[&JudgmentRecord]| {
        let g: Vec<f64> = v
            .iter()
            .filter_map(|r| r.gold_correct.map(|c| if c { 1.0 } else { 0.0 }))
            .collect();
        (!g.is_empty()).then(|| mean(&g))
    };
    let m0 = median(&times(&new));
    let below = ret.iter().filter(|r| r.decision_time_seconds < m0).count() as u64;
    let untied = ret.iter().filter(|r| r.decision_time_seconds != m0).count() as u64;
    Ok(ReturningEffect {
        new_count: new.len(),
        returning_count: ret.len(),
        new_median_time: m0,
        returning_median_time: median(&times(&ret)),
        below,
        untied,
        p_value: sign_test_upper(below, untied),
        new_accuracy: acc(&new),
        returning_accuracy: acc(&ret),
    })
}

pub fn returning_effect(logs: &[Vec<RunEvent>]) -> Result<ReturningEffect, AnalyticsError> {
    returning_effect_of(&judgments(logs)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub runs: usize,
    pub judgments: usize,
    pub workers: usize,
    pub returning_rate: f64,
    pub crossover_rate: f64,
    pub concentration: Vec<Concentration>,
    pub per_condition: Vec<ConditionStats>,
    pub timezone_balance: TimezoneBalance,
    pub unresolved_units: u64,
    /// Union merges that mixed judgments from different groups.
    pub cross_group_merges: u64,
    pub grace_judgments: usize,
}

pub fn report(logs: &[Vec<RunEvent>]) -> Result<BiasReport, AnalyticsError> {
    let records = judgments(logs)?;
    let summary = worker_summary(&records)?;
    let mut unresolved = 0;
    let mut cross_group = 0;
    for ev in logs.iter().flatten() {
        if let EventBody::LambdaApplied {
            unresolved: u,
            cross_group: c,
            ..
        } = &ev.body
        {
            unresolved += *u;
            cross_group += u64::from(*c);
        }
    }
    Ok(BiasReport {
        runs: logs.len(),
        judgments: records.len(),
        workers: summary.workers,
        returning_rate: summary.returning as f64 / summary.workers as f64,
        crossover_rate: summary.crossed as f64 / summary.workers as f64,
        concentration: vec![concentration_of(&records, "country")?],
        per_condition: condition_stats(&records, &labels(logs)?),
        timezone_balance: timezone_balance_of(&records)?,
        unresolved_units: unresolved,
        cross_group_merges: cross_group,
        grace_judgments: records.iter().filter(|r| r.grace).count(),
    })
}
