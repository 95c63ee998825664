//! Seeded discrete-event crowd marketplace.
//!
//! Arrivals follow an inhomogeneous Poisson process generated by thinning.
//! Each arrival opens a session: the worker asks for a unit, the adapter's
//! client answers with ASSIGN_UNIT or REJECT_WORKER, the worker submits a
//! judgment after a lognormal decision time and then either asks again or
//! leaves.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use chrono::DateTime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use sha2::{Digest, Sha256};

use super::model::CrowdModel;
use super::{Ack, Adapter, AdapterCommand, AdapterError, AdapterEvent, AdapterEventKind, TaskRef};
use crate::geo;
use crate::workflow::{DataUnit, TaskNode};
use crate::Timestamp;

const HOUR_MS: f64 = 3_600_000.0;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SimTaskSpec {
    pub node: TaskNode,
    pub units: Vec<DataUnit>,
}

#[derive(Debug, Clone)]
struct Person {
    country: String,
    fingerprint: String,
    platform_ids: Vec<String>,
    trust: f64,
    tasks_seen: BTreeSet<TaskRef>,
    last_task: Option<TaskRef>,
    busy: bool,
}

#[derive(Debug, Clone)]
struct SimTask {
    node: TaskNode,
    units: BTreeMap<String, DataUnit>,
    launched: bool,
    paused: bool,
    cancelled: bool,
}

impl SimTask {
    fn live(&self) -> bool {
        self.launched && !self.paused && !self.cancelled
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    AwaitingReply,
    Working,
    Thinking,
}

#[derive(Debug, Clone)]
struct Session {
    person: usize,
    token: u64,
    phase: Phase,
}

#[derive(Debug, Clone)]
enum Pending {
    Emit(AdapterEvent),
    Candidate,
    Submit {
        task: TaskRef,
        worker: String,
        token: u64,
        unit_id: String,
        answer: String,
        decision_time_seconds: f64,
    },
    Request {
        task: TaskRef,
        worker: String,
        token: u64,
    },
    Leave {
        task: TaskRef,
        worker: String,
        token: u64,
    },
}

/// The reference adapter. Fully determined by the model and the seed.
pub struct CrowdSimulator {
    model: CrowdModel,
    rng: ChaCha8Rng,
    persons: Vec<Person>,
    /// Persons who have not arrived yet, per country.
    fresh: BTreeMap<String, Vec<usize>>,
    /// Persons with at least one judgment, per country.
    past: BTreeMap<String, Vec<usize>>,
    tasks: BTreeMap<TaskRef, SimTask>,
    sessions: BTreeMap<(TaskRef, String), Session>,
    queue: BinaryHeap<Reverse<(i64, u64)>>,
    pending: BTreeMap<u64, Pending>,
    next_seq: u64,
    next_token: u64,
    arrivals_scheduled: bool,
}

fn ms(t: &Timestamp) -> i64 {
    t.timestamp_millis()
}

fn at_ms(v: i64) -> Timestamp {
    DateTime::from_timestamp_millis(v).expect("simulated time in range")
}

fn latent_answer(unit: &DataUnit, options: &[String]) -> String {
    if let Some(g) = &unit.gold_answer {
        return g.clone();
    }
    let digest = Sha256::digest(unit.unit_id.as_bytes());
    options[digest[0] as usize % options.len()].clone()
}

impl CrowdSimulator {
    pub fn new(model: CrowdModel, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut persons = Vec::new();
        let mut fresh: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let n = f64::from(model.population_size);
        let (lo, hi) = model.trust_range;
        for (country, share) in &model.country_mix {
            let count = ((n * share).round() as usize).max(1);
            for _ in 0..count {
                let idx = persons.len();
                persons.push(Person {
                    country: country.clone(),
                    fingerprint: format!("fp-{:016x}", rng.random::<u64>()),
                    platform_ids: Vec::new(),
                    trust: if hi > lo { rng.random_range(lo..=hi) } else { lo },
                    tasks_seen: BTreeSet::new(),
                    last_task: None,
                    busy: false,
                });
                fresh.entry(country.clone()).or_default().push(idx);
            }
        }
        Self {
            model,
            rng,
            persons,
            fresh,
            past: BTreeMap::new(),
            tasks: BTreeMap::new(),
            sessions: BTreeMap::new(),
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            next_seq: 0,
            next_token: 0,
            arrivals_scheduled: false,
        }
    }

    pub fn model(&self) -> &CrowdModel {
        &self.model
    }

    fn push(&mut self, time_ms: i64, p: Pending) {
        self.next_seq += 1;
        self.queue.push(Reverse((time_ms, self.next_seq)));
        self.pending.insert(self.next_seq, p);
    }

    fn live_tasks(&self) -> Vec<TaskRef> {
        self.tasks
            .iter()
            .filter(|(_, t)| t.live())
            .map(|(r, _)| r.clone())
            .collect()
    }

    fn exp_ms(&mut self, mean_ms: f64) -> i64 {
        let d = Exp::new(1.0 / mean_ms).expect("positive mean");
        (d.sample(&mut self.rng).round() as i64).max(1)
    }

    fn ensure_arrivals(&mut self, from_ms: i64) {
        if !self.arrivals_scheduled && !self.live_tasks().is_empty() {
            self.arrivals_scheduled = true;
            let gap = self.exp_ms(HOUR_MS / self.model.base_arrival_rate);
            self.push(from_ms + gap, Pending::Candidate);
        }
    }

    /// Relative intensity of each country at `t`, each in `[0, mix_c]`.
    fn intensities(&self, t: &Timestamp) -> Vec<(String, f64)> {
        self.model
            .country_mix
            .iter()
            .map(|(c, share)| {
                let curve = self.model.curve_for(c);
                let h = geo::local_hour(t, c).floor() as usize % 24;
                (c.clone(), share * curve[h] / self.model.curve_peak(c))
            })
            .collect()
    }

    fn pick_idle(&mut self, pool: &[usize]) -> Option<usize> {
        if pool.is_empty() {
            return None;
        }
        let p = pool[self.rng.random_range(0..pool.len())];
        (!self.persons[p].busy).then_some(p)
    }

    /// Live tasks in the group of the person's last task.
    fn same_group_live(&self, person: usize, live: &[TaskRef]) -> Vec<TaskRef> {
        let Some(group) = self.persons[person]
            .last_task
            .as_ref()
            .and_then(|t| self.tasks.get(t))
            .map(|t| &t.node.group_id)
        else {
            return Vec::new();
        };
        live.iter()
            .filter(|r| self.tasks.get(*r).is_some_and(|t| &t.node.group_id == group))
            .cloned()
            .collect()
    }

    fn arrival(&mut self, now_ms: i64) -> Option<AdapterEvent> {
        let live = self.live_tasks();
        if live.is_empty() {
            self.arrivals_scheduled = false;
            return None;
        }
        let gap = self.exp_ms(HOUR_MS / self.model.base_arrival_rate);
        self.push(now_ms + gap, Pending::Candidate);

        let t = at_ms(now_ms);
        let weights = self.intensities(&t);
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        let u: f64 = self.rng.random();
        if u >= total {
            return None;
        }
        // u < total, so reuse it to pick the country
        let mut acc = 0.0;
        let mut country = weights.last().expect("non-empty mix").0.clone();
        for (c, w) in &weights {
            acc += w;
            if u < acc {
                country = c.clone();
                break;
            }
        }

        // A returner either seeks a different task or comes back to the
        // condition of the last task; the latter needs that condition live.
        let wants_return = self.rng.random::<f64>() < self.model.p_return;
        let seek_cross = self.rng.random::<f64>() < self.model.p_cross_seek;
        let past = self.past.get(&country).cloned().unwrap_or_default();
        let mut returning = None;
        if wants_return {
            let pool: Vec<usize> = if seek_cross {
                past.clone()
            } else {
                past.iter()
                    .copied()
                    .filter(|p| !self.same_group_live(*p, &live).is_empty())
                    .collect()
            };
            returning = self.pick_idle(&pool);
        }
        let person = match returning {
            Some(p) => p,
            None => match self.fresh.get_mut(&country).and_then(Vec::pop) {
                Some(p) => p,
                None => {
                    returning = self.pick_idle(&past);
                    returning?
                }
            },
        };

        let last = self.persons[person].last_task.clone();
        let task = match (&returning, last) {
            (Some(_), Some(last)) if !seek_cross => {
                if live.contains(&last) {
                    last
                } else {
                    let same = self.same_group_live(person, &live);
                    if same.is_empty() {
                        live[self.rng.random_range(0..live.len())].clone()
                    } else {
                        same[self.rng.random_range(0..same.len())].clone()
                    }
                }
            }
            (Some(_), Some(last)) if live.len() > 1 => {
                let others: Vec<&TaskRef> = live.iter().filter(|r| **r != last).collect();
                others[self.rng.random_range(0..others.len())].clone()
            }
            _ => live[self.rng.random_range(0..live.len())].clone(),
        };

        let fresh_id = self.persons[person].platform_ids.is_empty()
            || self.rng.random::<f64>() < self.model.p_fresh_platform_id;
        if fresh_id {
            let k = self.persons[person].platform_ids.len();
            self.persons[person].platform_ids.push(format!("sw{person:05}-{k}"));
        }
        let p = &mut self.persons[person];
        let worker = p.platform_ids.last().expect("has a platform id").clone();
        if self.sessions.contains_key(&(task.clone(), worker.clone())) {
            return None;
        }
        p.busy = true;
        let (fingerprint, country, trust) = (p.fingerprint.clone(), p.country.clone(), p.trust);
        self.next_token += 1;
        self.sessions.insert(
            (task.clone(), worker.clone()),
            Session {
                person,
                token: self.next_token,
                phase: Phase::AwaitingReply,
            },
        );
        Some(AdapterEvent {
            time: t,
            kind: AdapterEventKind::WorkerArrival {
                task,
                worker,
                fingerprint: Some(fingerprint),
                country,
                trust,
            },
        })
    }

    fn end_session(&mut self, task: &str, worker: &str) {
        if let Some(s) = self.sessions.remove(&(task.to_string(), worker.to_string())) {
            self.persons[s.person].busy = false;
        }
    }

    fn session_matches(&self, task: &str, worker: &str, token: u64) -> bool {
        self.sessions
            .get(&(task.to_string(), worker.to_string()))
            .is_some_and(|s| s.token == token)
    }

    fn process(&mut self, time_ms: i64, p: Pending) -> Option<AdapterEvent> {
        let time = at_ms(time_ms);
        match p {
            Pending::Emit(ev) => Some(ev),
            Pending::Candidate => self.arrival(time_ms),
            Pending::Submit {
                task,
                worker,
                token,
                unit_id,
                answer,
                decision_time_seconds,
            } => {
                if !self.session_matches(&task, &worker, token) {
                    return None;
                }
                let key = (task.clone(), worker.clone());
                let person = self.sessions[&key].person;
                let p = &mut self.persons[person];
                if p.tasks_seen.is_empty() {
                    self.past.entry(p.country.clone()).or_default().push(person);
                }
                p.tasks_seen.insert(task.clone());
                p.last_task = Some(task.clone());
                let next = if self.rng.random::<f64>() < self.model.p_continue {
                    let think = self.exp_ms(self.model.think_time_seconds * 1000.0);
                    self.sessions.get_mut(&key).expect("matched").phase = Phase::Thinking;
                    (
                        time_ms + think,
                        Pending::Request {
                            task: task.clone(),
                            worker: worker.clone(),
                            token,
                        },
                    )
                } else {
                    (
                        time_ms,
                        Pending::Leave {
                            task: task.clone(),
                            worker: worker.clone(),
                            token,
                        },
                    )
                };
                self.push(next.0, next.1);
                Some(AdapterEvent {
                    time,
                    kind: AdapterEventKind::JudgmentSubmitted {
                        task,
                        worker,
                        unit_id,
                        answer,
                        decision_time_seconds,
                    },
                })
            }
            Pending::Request {
                task,
                worker,
                token,
            } => {
                if !self.session_matches(&task, &worker, token) {
                    return None;
                }
                if self.tasks.get(&task).is_some_and(SimTask::live) {
                    let key = (task.clone(), worker.clone());
                    let s = self.sessions.get_mut(&key).expect("matched");
                    s.phase = Phase::AwaitingReply;
                    let p = &self.persons[s.person];
                    Some(AdapterEvent {
                        time,
                        kind: AdapterEventKind::WorkerArrival {
                            task,
                            worker,
                            fingerprint: Some(p.fingerprint.clone()),
                            country: p.country.clone(),
                            trust: p.trust,
                        },
                    })
                } else {
                    self.end_session(&task, &worker);
                    Some(AdapterEvent {
                        time,
                        kind: AdapterEventKind::WorkerAbandoned { task, worker },
                    })
                }
            }
            Pending::Leave {
                task,
                worker,
                token,
            } => {
                if !self.session_matches(&task, &worker, token) {
                    return None;
                }
                self.end_session(&task, &worker);
                Some(AdapterEvent {
                    time,
                    kind: AdapterEventKind::WorkerAbandoned { task, worker },
                })
            }
        }
    }

    fn task_mut(&mut self, task: &str) -> Result<&mut SimTask, AdapterError> {
        self.tasks
            .get_mut(task)
            .ok_or_else(|| AdapterError::UnknownTask(task.to_string()))
    }

    fn assign(&mut self, at: &Timestamp, task: &str, worker: &str, unit_id: &str) -> Result<(), AdapterError> {
        let key = (task.to_string(), worker.to_string());
        let no_session = || AdapterError::NoSession {
            task: task.to_string(),
            worker: worker.to_string(),
        };
        let session = self.sessions.get(&key).ok_or_else(no_session)?;
        if session.phase != Phase::AwaitingReply {
            return Err(no_session());
        }
        let (person, token) = (session.person, session.token);
        let sim_task = &self.tasks[task];
        let unit = sim_task
            .units
            .get(unit_id)
            .ok_or_else(|| AdapterError::Mapping {
                command: "ASSIGN_UNIT".into(),
                message: format!("unknown unit `{unit_id}`"),
            })?;
        let options = sim_task.node.answer_options().to_vec();
        let group = sim_task.node.group_id.clone();
        let truth = latent_answer(unit, &options);

        if self.rng.random::<f64>() < self.model.p_silent_abandon {
            self.end_session(task, worker);
            return Ok(());
        }
        let returning = self.persons[person].tasks_seen.iter().any(|t| t != task);
        let params = self.model.decision_time_for(&group);
        let mut median = params.median_seconds * self.model.drift.factor(at);
        if returning {
            median *= self.model.returning_time_multiplier;
        }
        let z: f64 = StandardNormal.sample(&mut self.rng);
        let dt_ms = ((median * (params.dispersion * z).exp() * 1000.0).round() as i64).max(1000);

        let correct = self.rng.random::<f64>() < self.model.accuracy_for(&group);
        let answer = if correct || options.len() < 2 {
            truth
        } else {
            let wrong: Vec<&String> = options.iter().filter(|o| **o != truth).collect();
            wrong[self.rng.random_range(0..wrong.len())].clone()
        };
        self.sessions.get_mut(&key).expect("checked").phase = Phase::Working;
        self.push(
            ms(at) + dt_ms,
            Pending::Submit {
                task: task.to_string(),
                worker: worker.to_string(),
                token,
                unit_id: unit_id.to_string(),
                answer,
                decision_time_seconds: dt_ms as f64 / 1000.0,
            },
        );
        Ok(())
    }
}

impl Adapter for CrowdSimulator {
    fn name(&self) -> &str {
        "sim"
    }

    fn execute(&mut self, at: Timestamp, command: &AdapterCommand) -> Result<Ack, AdapterError> {
        match command {
            AdapterCommand::CreateTask { node, units } => {
                let task = format!("sim-task-{:04}", self.tasks.len() + 1);
                self.tasks.insert(
                    task.clone(),
                    SimTask {
                        node: node.clone(),
                        units: units.iter().map(|u| (u.unit_id.clone(), u.clone())).collect(),
                        launched: false,
                        paused: false,
                        cancelled: false,
                    },
                );
                self.push(
                    ms(&at),
                    Pending::Emit(AdapterEvent {
                        time: at,
                        kind: AdapterEventKind::TaskCreated {
                            node_id: node.node_id.clone(),
                            task: task.clone(),
                        },
                    }),
                );
                return Ok(Ack { task: Some(task) });
            }
            AdapterCommand::Launch { task } => self.task_mut(task)?.launched = true,
            AdapterCommand::Pause { task } => self.task_mut(task)?.paused = true,
            AdapterCommand::Resume { task } => self.task_mut(task)?.paused = false,
            AdapterCommand::Cancel { task } => {
                self.task_mut(task)?.cancelled = true;
                let open: Vec<String> = self
                    .sessions
                    .keys()
                    .filter(|(t, _)| t == task)
                    .map(|(_, w)| w.clone())
                    .collect();
                for w in open {
                    self.end_session(task, &w);
                }
            }
            AdapterCommand::Hide { .. } => {
                return Err(AdapterError::Unsupported {
                    adapter: "sim".into(),
                    command: "HIDE".into(),
                })
            }
            AdapterCommand::AssignUnit {
                task,
                worker,
                unit_id,
            } => {
                self.task_mut(task)?;
                self.assign(&at, task, worker, unit_id)?;
            }
            AdapterCommand::RejectWorker { task, worker, .. } => {
                self.task_mut(task)?;
                self.end_session(task, worker);
            }
        }
        self.ensure_arrivals(ms(&at));
        Ok(Ack { task: None })
    }

    fn next_event(&mut self, until: Timestamp) -> Result<Option<AdapterEvent>, AdapterError> {
        let limit = ms(&until);
        while let Some(Reverse((t, seq))) = self.queue.peek().copied() {
            if t > limit {
                break;
            }
            self.queue.pop();
            let p = self.pending.remove(&seq).expect("queued action exists");
            if let Some(ev) = self.process(t, p) {
                return Ok(Some(ev));
            }
        }
        Ok(None)
    }
}

/// Runs the simulator over `[from, to)` with every task launched at `from`
/// and a naive client that assigns units round-robin, skipping units the
/// platform worker has already judged.
pub fn simulate(
    model: &CrowdModel,
    tasks: &[SimTaskSpec],
    from: Timestamp,
    to: Timestamp,
    seed: u64,
) -> Vec<AdapterEvent> {
    let mut sim = CrowdSimulator::new(model.clone(), seed);
    let mut refs = BTreeMap::new();
    for spec in tasks {
        let ack = sim
            .execute(
                from,
                &AdapterCommand::CreateTask {
                    node: spec.node.clone(),
                    units: spec.units.clone(),
                },
            )
            .expect("create never fails");
        let r = ack.task.expect("create returns a ref");
        sim.execute(from, &AdapterCommand::Launch { task: r.clone() })
            .expect("task exists");
        let ids: Vec<String> = spec.units.iter().map(|u| u.unit_id.clone()).collect();
        refs.insert(r, ids);
    }
    let mut cursor: BTreeMap<TaskRef, usize> = BTreeMap::new();
    let mut judged: BTreeSet<(TaskRef, String, String)> = BTreeSet::new();
    let end = at_ms(ms(&to) - 1);
    let mut out = Vec::new();
    while let Some(ev) = sim.next_event(end).expect("simulator is infallible") {
        if let AdapterEventKind::WorkerArrival { task, worker, .. } = &ev.kind {
            let units = &refs[task];
            let start = cursor.get(task).copied().unwrap_or(0);
            let pick = (0..units.len())
                .map(|i| (start + i) % units.len())
                .find(|&i| !judged.contains(&(task.clone(), worker.clone(), units[i].clone())));
            let cmd = match pick {
                Some(i) => {
                    cursor.insert(task.clone(), i + 1);
                    judged.insert((task.clone(), worker.clone(), units[i].clone()));
                    AdapterCommand::AssignUnit {
                        task: task.clone(),
                        worker: worker.clone(),
                        unit_id: units[i].clone(),
                    }
                }
                None => AdapterCommand::RejectWorker {
                    task: task.clone(),
                    worker: worker.clone(),
                    reason: "NO_UNITS_LEFT".into(),
                },
            };
            sim.execute(ev.time, &cmd).expect("reply to a live session");
        }
        out.push(ev);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::Question;
    use chrono::Duration;

    fn t0() -> Timestamp {
        crate::parse_time("2019-05-01T00:00:00Z").unwrap()
    }

    fn node(id: &str, group: &str) -> TaskNode {
        TaskNode {
            node_id: id.into(),
            title: id.into(),
            instructions: String::new(),
            question_schema: vec![Question {
                question_id: "q".into(),
                options: vec!["yes".into(), "no".into()],
            }],
            judgments_per_unit: 3,
            group_id: group.into(),
            population_filter: None,
            reward_per_judgment: 0.0,
        }
    }

    fn spec(id: &str, group: &str, n: usize) -> SimTaskSpec {
        SimTaskSpec {
            node: node(id, group),
            units: (0..n)
                .map(|i| DataUnit::new(format!("{id}-u{i:03}")).with_gold(if i % 2 == 0 { "yes" } else { "no" }))
                .collect(),
        }
    }

    fn flat(model: &mut CrowdModel) {
        model.default_activity_curve = vec![1.0; 24];
    }

    #[test]
    fn deterministic_for_a_seed() {
        let m = CrowdModel::calibrated();
        let tasks = [spec("a", "g1", 20), spec("b", "g2", 20)];
        let a = simulate(&m, &tasks, t0(), t0() + Duration::hours(12), 9);
        let b = simulate(&m, &tasks, t0(), t0() + Duration::hours(12), 9);
        assert!(!a.is_empty());
        assert_eq!(a, b);
        let c = simulate(&m, &tasks, t0(), t0() + Duration::hours(12), 10);
        assert_ne!(a, c);
    }

    #[test]
    fn no_return_means_no_returning_persons() {
        let mut m = CrowdModel::calibrated();
        m.p_return = 0.0;
        m.p_continue = 0.0;
        let tasks = [spec("a", "g1", 50), spec("b", "g2", 50)];
        let evs = simulate(&m, &tasks, t0(), t0() + Duration::hours(48), 3);
        let mut seen = BTreeSet::new();
        let mut arrivals = 0;
        for ev in &evs {
            if let AdapterEventKind::WorkerArrival { fingerprint, .. } = &ev.kind {
                arrivals += 1;
                assert!(seen.insert(fingerprint.clone()), "fingerprint arrived twice");
            }
        }
        assert!(arrivals > 100);
    }

    #[test]
    fn single_country_mix() {
        let mut m = CrowdModel::calibrated();
        m.country_mix = [("VE".to_string(), 1.0)].into_iter().collect();
        let evs = simulate(&m, &[spec("a", "g1", 30)], t0(), t0() + Duration::hours(24), 4);
        assert!(evs.iter().any(|e| matches!(e.kind, AdapterEventKind::WorkerArrival { .. })));
        for ev in &evs {
            if let AdapterEventKind::WorkerArrival { country, .. } = &ev.kind {
                assert_eq!(country, "VE");
            }
        }
    }

    #[test]
    fn arrival_rate_matches_poisson_mean() {
        // flat curve, no sessions beyond one request, no returns
        let mut m = CrowdModel::calibrated();
        flat(&mut m);
        m.p_return = 0.0;
        m.p_continue = 0.0;
        m.population_size = 200_000;
        m.base_arrival_rate = 30.0;
        let hours = 500.0;
        for seed in [1u64, 2, 3] {
            let evs = simulate(
                &m,
                &[spec("a", "g1", 10_000)],
                t0(),
                t0() + Duration::hours(hours as i64),
                seed,
            );
            let n = evs
                .iter()
                .filter(|e| matches!(e.kind, AdapterEventKind::WorkerArrival { .. }))
                .count() as f64;
            let mean = m.base_arrival_rate * hours;
            assert!((n - mean).abs() < 3.0 * mean.sqrt(), "seed {seed}: {n} vs {mean}");
        }
    }

    #[test]
    fn lifecycle_contract() {
        let mut m = CrowdModel::calibrated();
        flat(&mut m);
        let mut sim = CrowdSimulator::new(m, 5);
        let s = spec("a", "g1", 10);
        let ack = sim
            .execute(t0(), &AdapterCommand::CreateTask { node: s.node.clone(), units: s.units.clone() })
            .unwrap();
        let task = ack.task.unwrap();
        let created = sim.next_event(t0()).unwrap().unwrap();
        assert_eq!(
            created.kind,
            AdapterEventKind::TaskCreated { node_id: "a".into(), task: task.clone() }
        );
        // nothing before launch
        assert_eq!(sim.next_event(t0() + Duration::hours(5)).unwrap(), None);

        sim.execute(t0() + Duration::hours(5), &AdapterCommand::Launch { task: task.clone() })
            .unwrap();
        let arrival = sim.next_event(t0() + Duration::hours(10)).unwrap().unwrap();
        let AdapterEventKind::WorkerArrival { worker, .. } = arrival.kind.clone() else {
            panic!("expected an arrival, got {arrival:?}")
        };
        // rejected arrivals never judge
        sim.execute(
            arrival.time,
            &AdapterCommand::RejectWorker { task: task.clone(), worker: worker.clone(), reason: "x".into() },
        )
        .unwrap();
        sim.execute(arrival.time, &AdapterCommand::Pause { task: task.clone() }).unwrap();
        let pause_end = arrival.time + Duration::hours(24);
        while let Some(ev) = sim.next_event(pause_end).unwrap() {
            assert!(!matches!(ev.kind, AdapterEventKind::WorkerArrival { .. }), "arrival while paused");
            if let AdapterEventKind::JudgmentSubmitted { worker: w, .. } = &ev.kind {
                assert_ne!(w, &worker);
            }
        }
        sim.execute(pause_end, &AdapterCommand::Resume { task: task.clone() }).unwrap();
        let next = sim.next_event(pause_end + Duration::hours(10)).unwrap().unwrap();
        assert!(matches!(next.kind, AdapterEventKind::WorkerArrival { .. }));
        assert!(matches!(
            sim.execute(t0(), &AdapterCommand::Launch { task: "nope".into() }),
            Err(AdapterError::UnknownTask(_))
        ));
        assert!(matches!(
            sim.execute(t0(), &AdapterCommand::Hide { task }),
            Err(AdapterError::Unsupported { .. })
        ));
    }

    #[test]
    fn judgments_follow_arrivals() {
        let m = CrowdModel::calibrated();
        let evs = simulate(&m, &[spec("a", "g1", 40), spec("b", "g2", 40)], t0(), t0() + Duration::hours(24), 11);
        let mut awaiting: BTreeSet<(String, String)> = BTreeSet::new();
        let mut judgments = 0;
        for ev in &evs {
            match &ev.kind {
                AdapterEventKind::WorkerArrival { task, worker, .. } => {
                    awaiting.insert((task.clone(), worker.clone()));
                }
                AdapterEventKind::JudgmentSubmitted { task, worker, decision_time_seconds, .. } => {
                    judgments += 1;
                    assert!(awaiting.remove(&(task.clone(), worker.clone())), "judgment without arrival");
                    assert!(*decision_time_seconds >= 1.0);
                }
                _ => {}
            }
        }
        assert!(judgments > 50);
        assert!(evs.windows(2).all(|w| w[0].time <= w[1].time));
    }

    #[test]
    fn accuracy_tracks_model() {
        let mut m = CrowdModel::calibrated();
        m.default_accuracy = 0.9;
        let evs = simulate(&m, &[spec("a", "g1", 400)], t0(), t0() + Duration::hours(72), 12);
        let (mut n, mut ok) = (0.0f64, 0.0f64);
        for ev in &evs {
            if let AdapterEventKind::JudgmentSubmitted { unit_id, answer, .. } = &ev.kind {
                let i: usize = unit_id[3..].parse().unwrap();
                let truth = if i % 2 == 0 { "yes" } else { "no" };
                n += 1.0;
                if answer == truth {
                    ok += 1.0;
                }
            }
        }
        let acc = ok / n;
        assert!(n > 500.0 && (acc - 0.9).abs() < 3.0 * (0.09f64 / n).sqrt() + 0.01, "{acc} over {n}");
    }
}
