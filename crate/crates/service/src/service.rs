use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crowdflow_core::adapters::{simulate, CrowdModel, SimTaskSpec};
use crowdflow_core::analytics::BiasReport;
use crowdflow_core::eligibility::{Design, EligibilityPolicy, ReturningRule};
use crowdflow_core::orchestrator::RunConfig;
use crowdflow_core::population::QuotaSpec;
use crowdflow_core::scheduler::{Action, Schedule};
use crowdflow_core::workflow::{check_document, Violation, Workflow};
use crowdflow_core::{parse_time, scenarios, Timestamp};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::ServiceError;
use crate::runs::{public_event, Adapters, EventPage, Progress, RunSlot, RunStatus};
use crate::store::{now, valid_id, RunRecord, Store, StoreError, StoredResponse, StoredWorkflow, WorkflowStatus};

/// Runs stop advancing this long after deployment unless told otherwise.
pub const DEFAULT_HORIZON_HOURS: u64 = 24 * scenarios::HORIZON_DAYS as u64;
/// Steps taken per lock acquisition while driving.
const BATCH: usize = 256;

pub struct RunHandle {
    slot: Mutex<RunSlot>,
    changed: Condvar,
    driving: AtomicBool,
}

impl RunHandle {
    fn new(slot: RunSlot) -> Arc<Self> {
        Arc::new(Self {
            slot: Mutex::new(slot),
            changed: Condvar::new(),
            driving: AtomicBool::new(false),
        })
    }

    pub fn lock(&self) -> MutexGuard<'_, RunSlot> {
        self.slot.lock().expect("run lock poisoned")
    }
}

/// Eligibility policy as a shorthand string (`open`, `between`, `within`,
/// optionally `:deny-all`, `:same-task` or `:same-group`) or a full object.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum PolicyArg {
    Short(String),
    Full(EligibilityPolicy),
}

impl Default for PolicyArg {
    fn default() -> Self {
        PolicyArg::Short("open".into())
    }
}

pub fn parse_policy(s: &str) -> Result<EligibilityPolicy, String> {
    let (design, rule) = s.split_once(':').map_or((s, None), |(d, r)| (d, Some(r)));
    let design = match design.to_ascii_lowercase().replace('-', "_").as_str() {
        "open" => Design::Open,
        "between" | "between_subjects" => Design::BetweenSubjects,
        "within" | "within_subjects" => Design::WithinSubjects,
        other => return Err(format!("unknown policy `{other}`")),
    };
    let rule = match rule.map(|r| r.to_ascii_lowercase().replace('_', "-")) {
        None => ReturningRule::AllowSameGroup,
        Some(r) => match r.as_str() {
            "deny-all" => ReturningRule::DenyAllReturning,
            "same-task" => ReturningRule::AllowSameTask,
            "same-group" => ReturningRule::AllowSameGroup,
            other => return Err(format!("unknown returning rule `{other}`")),
        },
    };
    EligibilityPolicy::new(design, rule).map_err(|e| e.to_string())
}

impl PolicyArg {
    pub fn resolve(&self) -> Result<EligibilityPolicy, String> {
        match self {
            PolicyArg::Short(s) => parse_policy(s),
            PolicyArg::Full(p) => Ok(*p),
        }
    }
}

fn default_adapter() -> String {
    "sim".into()
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeployRequest {
    #[serde(default)]
    pub workflow_id: Option<String>,
    /// An inline document, used instead of a stored one.
    #[serde(default)]
    pub workflow: Option<Value>,
    #[serde(default)]
    pub policy: PolicyArg,
    #[serde(default)]
    pub quota: Option<QuotaSpec>,
    #[serde(default)]
    pub schedule: Option<Schedule>,
    #[serde(default = "default_adapter")]
    pub adapter: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub start: Option<Timestamp>,
    #[serde(default)]
    pub speed: Option<f64>,
    #[serde(default)]
    pub horizon_hours: Option<u64>,
    #[serde(default)]
    pub grace_minutes: Option<u32>,
    #[serde(default)]
    pub model: Option<CrowdModel>,
    #[serde(default)]
    pub request_id: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SimWindow {
    pub start: Timestamp,
    pub end: Timestamp,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateRequest {
    #[serde(default)]
    pub model: Option<CrowdModel>,
    pub tasks: Vec<SimTaskSpec>,
    pub window: SimWindow,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationResult {
    pub valid: bool,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub workflow_id: String,
    pub adapter: String,
    pub seed: u64,
    pub state: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corrupt: Option<String>,
}

/// Unpaced simulated runs start here unless a schedule or the request says
/// otherwise.
pub fn sim_epoch() -> Timestamp {
    scenarios::start()
}

fn default_start(adapter: &str, schedule: &Schedule) -> Timestamp {
    if !Adapters::is_sim(adapter) {
        return now();
    }
    match schedule {
        Schedule::Always => sim_epoch(),
        Schedule::Windows(w) => w.iter().map(|w| w.start).min().unwrap_or_else(sim_epoch),
        Schedule::Recurring(r) => r.from_date.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc(),
    }
}

/// Checks a document: unreadable text is a bad request, a readable document
/// yields its violations.
pub fn check(text: &str) -> Result<(Option<Workflow>, Vec<Violation>), ServiceError> {
    check_document(text).map_err(|e| ServiceError::BadRequest(e.to_string()))
}

pub struct Service {
    store: Store,
    adapters: Adapters,
    runs: RwLock<BTreeMap<String, Arc<RunHandle>>>,
    writes: Mutex<()>,
    requests: Mutex<()>,
    autodrive: AtomicBool,
    stopping: AtomicBool,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Service {
    /// Opens a data directory and recovers every run in it.
    pub fn open(root: &Path, adapters: Adapters) -> Result<Arc<Self>, ServiceError> {
        let store = Store::open(root)?;
        let mut runs = BTreeMap::new();
        for id in store.run_ids()? {
            let record = match store.read_record(&id) {
                Ok(r) => r,
                Err(StoreError::Format { .. }) => continue,
                Err(e) => return Err(e.into()),
            };
            let slot = RunSlot::recover(&store, record, &adapters)?;
            runs.insert(id, RunHandle::new(slot));
        }
        Ok(Arc::new(Self {
            store,
            adapters,
            runs: RwLock::new(runs),
            writes: Mutex::new(()),
            requests: Mutex::new(()),
            autodrive: AtomicBool::new(false),
            stopping: AtomicBool::new(false),
            threads: Mutex::new(Vec::new()),
        }))
    }

    pub fn adapter_names(&self) -> Vec<String> {
        self.adapters.names()
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// Drives runs in background threads from now on, starting with every
    /// run that was live when the directory was opened.
    pub fn start_driving(self: &Arc<Self>) {
        self.autodrive.store(true, Ordering::SeqCst);
        let handles: Vec<Arc<RunHandle>> = self.runs.read().expect("runs lock").values().cloned().collect();
        for h in handles {
            self.kick(&h);
        }
    }

    /// Stops background driving after the current batch.
    pub fn shutdown(&self) {
        self.stopping.store(true, Ordering::SeqCst);
        for h in self.runs.read().expect("runs lock").values() {
            h.changed.notify_all();
        }
        let threads: Vec<JoinHandle<()>> = self.threads.lock().expect("threads lock").drain(..).collect();
        for t in threads {
            let _ = t.join();
        }
    }

    fn kick(self: &Arc<Self>, handle: &Arc<RunHandle>) {
        if !self.autodrive.load(Ordering::SeqCst) || self.stopping.load(Ordering::SeqCst) {
            return;
        }
        if handle.driving.swap(true, Ordering::SeqCst) {
            return;
        }
        let svc = Arc::clone(self);
        let h = Arc::clone(handle);
        let t = std::thread::spawn(move || {
            svc.drive_loop(&h);
            h.driving.store(false, Ordering::SeqCst);
        });
        self.threads.lock().expect("threads lock").push(t);
    }

    fn drive_loop(&self, h: &RunHandle) {
        while !self.stopping.load(Ordering::SeqCst) {
            let mut slot = h.lock();
            let remote = !Adapters::is_sim(&slot.record.adapter);
            let progress = slot.advance(&self.store, BATCH, true);
            h.changed.notify_all();
            let wait = match progress {
                Ok(Progress::Advanced) => None,
                Ok(Progress::Waiting) if remote => Some(Duration::from_millis(500)),
                Ok(Progress::Waiting) => Some(Duration::from_millis(20)),
                Ok(Progress::Idle) => Some(Duration::from_millis(250)),
                Ok(Progress::Finished) | Err(_) => return,
            };
            match wait {
                Some(w) => drop(h.changed.wait_timeout(slot, w).expect("run lock poisoned")),
                None => drop(slot),
            }
        }
    }

    /// Drives a run in the calling thread, unpaced, until it needs an
    /// action or cannot advance further.
    pub fn drive(&self, run_id: &str) -> Result<RunStatus, ServiceError> {
        let h = self.handle(run_id)?;
        loop {
            let mut slot = h.lock();
            let remote = !Adapters::is_sim(&slot.record.adapter);
            match slot.advance(&self.store, BATCH, false)? {
                Progress::Advanced => {}
                Progress::Waiting if remote => {
                    drop(slot);
                    std::thread::sleep(Duration::from_millis(500));
                }
                Progress::Waiting | Progress::Idle | Progress::Finished => return Ok(slot.status()),
            }
        }
    }

    fn handle(&self, run_id: &str) -> Result<Arc<RunHandle>, ServiceError> {
        self.runs
            .read()
            .expect("runs lock")
            .get(run_id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("run `{run_id}`")))
    }

    /// Answers a repeated request with the stored response of its first
    /// execution. Server errors are not stored, so those retries re-execute.
    pub fn idempotent(
        &self,
        key: Option<String>,
        f: impl FnOnce() -> Result<(u16, Value), ServiceError>,
    ) -> Result<(u16, Value), ServiceError> {
        let Some(key) = key else {
            return f();
        };
        let _guard = self.requests.lock().expect("requests lock");
        if let Some(r) = self.store.get_response(&key)? {
            return Ok((r.status, r.body));
        }
        let (status, body) = match f() {
            Ok(ok) => ok,
            Err(e) if e.status() >= 500 => return Err(e),
            Err(e) => (e.status(), e.body()),
        };
        self.store.put_response(&StoredResponse {
            key,
            status,
            body: body.clone(),
        })?;
        Ok((status, body))
    }

    pub fn put_workflow(&self, id: &str, text: &str) -> Result<StoredWorkflow, ServiceError> {
        if !valid_id(id) {
            return Err(ServiceError::BadRequest(format!("invalid workflow id `{id}`")));
        }
        let document: Value =
            serde_json::from_str(text).map_err(|e| ServiceError::BadRequest(format!("malformed JSON: {e}")))?;
        match document.get("workflow_id").and_then(Value::as_str) {
            Some(doc_id) if doc_id == id => {}
            Some(doc_id) => {
                return Err(ServiceError::BadRequest(format!(
                    "document workflow_id `{doc_id}` does not match `{id}`"
                )))
            }
            None => return Err(ServiceError::BadRequest("document has no workflow_id".into())),
        }
        let (_, violations) = check(text)?;
        let _guard = self.writes.lock().expect("writes lock");
        let t = now();
        let previous = self.store.get_workflow(id)?;
        let wf = StoredWorkflow {
            workflow_id: id.to_string(),
            version: previous.as_ref().map_or(1, |p| p.version + 1),
            created_at: previous.as_ref().map_or(t, |p| p.created_at),
            updated_at: t,
            status: if violations.is_empty() {
                WorkflowStatus::Valid
            } else {
                WorkflowStatus::DraftInvalid
            },
            violations,
            document,
        };
        self.store.put_workflow(&wf)?;
        Ok(wf)
    }

    pub fn get_workflow(&self, id: &str) -> Result<StoredWorkflow, ServiceError> {
        if !valid_id(id) {
            return Err(ServiceError::NotFound(format!("workflow `{id}`")));
        }
        self.store
            .get_workflow(id)?
            .ok_or_else(|| ServiceError::NotFound(format!("workflow `{id}`")))
    }

    pub fn delete_workflow(&self, id: &str) -> Result<(), ServiceError> {
        let _guard = self.writes.lock().expect("writes lock");
        if valid_id(id) && self.store.delete_workflow(id)? {
            Ok(())
        } else {
            Err(ServiceError::NotFound(format!("workflow `{id}`")))
        }
    }

    pub fn list_workflows(&self) -> Result<Vec<StoredWorkflow>, ServiceError> {
        Ok(self.store.list_workflows()?)
    }

    pub fn validate_workflow(&self, id: &str) -> Result<ValidationResult, ServiceError> {
        let wf = self.get_workflow(id)?;
        let (_, violations) = check(&wf.document.to_string())?;
        Ok(ValidationResult {
            valid: violations.is_empty(),
            violations,
        })
    }

    pub fn deploy(self: &Arc<Self>, req: DeployRequest) -> Result<RunStatus, ServiceError> {
        let (workflow_id, version, text) = match (&req.workflow_id, &req.workflow) {
            (_, Some(doc)) => {
                let id = doc.get("workflow_id").and_then(Value::as_str).unwrap_or("inline");
                (id.to_string(), 0, doc.to_string())
            }
            (Some(id), None) => {
                let wf = self.get_workflow(id)?;
                (id.clone(), wf.version, wf.document.to_string())
            }
            (None, None) => return Err(ServiceError::BadRequest("workflow_id or workflow is required".into())),
        };
        let (workflow, violations) = check(&text)?;
        let workflow = match workflow {
            Some(w) if violations.is_empty() => w,
            _ => return Err(ServiceError::Invalid(violations)),
        };
        let policy = req.policy.resolve().map_err(ServiceError::BadRequest)?;
        if req.speed.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
            return Err(ServiceError::BadRequest("speed must be positive".into()));
        }
        if let Some(m) = &req.model {
            m.validate().map_err(|e| ServiceError::Unprocessable(format!("model: {e}")))?;
        }
        let schedule = req.schedule.clone().unwrap_or_default();
        let mut config = RunConfig::new(workflow, policy, &req.adapter, req.seed).with_schedule(schedule.clone());
        if let Some(q) = &req.quota {
            config = config.with_quota(q.clone());
        }
        if let Some(g) = req.grace_minutes {
            config.grace_minutes = g;
        }
        let _guard = self.writes.lock().expect("writes lock");
        let run_id = self.next_run_id();
        let record = RunRecord {
            run_id: run_id.clone(),
            workflow_id,
            workflow_version: version,
            adapter: req.adapter.clone(),
            seed: req.seed,
            policy,
            quota: req.quota.clone(),
            schedule: schedule.clone(),
            start: req.start.unwrap_or_else(|| default_start(&req.adapter, &schedule)),
            speed: req.speed,
            horizon_hours: req.horizon_hours.unwrap_or(DEFAULT_HORIZON_HOURS),
            model: req.model.clone(),
            created_at: now(),
        };
        let adapter = self.adapters.make(&record)?;
        let slot = RunSlot::deploy(&self.store, record, adapter, config)?;
        let status = slot.status();
        let handle = RunHandle::new(slot);
        self.runs.write().expect("runs lock").insert(run_id, Arc::clone(&handle));
        self.kick(&handle);
        Ok(status)
    }

    fn next_run_id(&self) -> String {
        let runs = self.runs.read().expect("runs lock");
        let n = runs
            .keys()
            .filter_map(|k| k.strip_prefix("run-").and_then(|n| n.parse::<u64>().ok()))
            .max()
            .unwrap_or(0);
        format!("run-{:04}", n + 1)
    }

    pub fn act(self: &Arc<Self>, run_id: &str, action: Action) -> Result<RunStatus, ServiceError> {
        if matches!(action, Action::Deploy | Action::DataComplete) {
            return Err(ServiceError::BadRequest(format!("{action:?} is not a requester action")));
        }
        let h = self.handle(run_id)?;
        let status = {
            let mut slot = h.lock();
            slot.act(&self.store, action)?;
            slot.status()
        };
        h.changed.notify_all();
        self.kick(&h);
        Ok(status)
    }

    pub fn status(&self, run_id: &str) -> Result<RunStatus, ServiceError> {
        Ok(self.handle(run_id)?.lock().status())
    }

    pub fn list_runs(&self) -> Vec<RunSummary> {
        self.runs
            .read()
            .expect("runs lock")
            .values()
            .map(|h| {
                let s = h.lock();
                RunSummary {
                    run_id: s.record.run_id.clone(),
                    workflow_id: s.record.workflow_id.clone(),
                    adapter: s.record.adapter.clone(),
                    seed: s.record.seed,
                    state: s.state().map_or("UNKNOWN", |st| st.as_str()).to_string(),
                    corrupt: s.corrupt.clone(),
                }
            })
            .collect()
    }

    pub fn report(&self, run_id: &str) -> Result<BiasReport, ServiceError> {
        self.handle(run_id)?.lock().report()
    }

    /// The raw log text of a run.
    pub fn log_text(&self, run_id: &str) -> Result<String, ServiceError> {
        let h = self.handle(run_id)?;
        let slot = h.lock();
        Ok(slot.lines().iter().map(|l| format!("{l}\n")).collect())
    }

    /// Events after `since_seq`, waiting up to `wait` for one to appear.
    pub fn events(&self, run_id: &str, since_seq: u64, limit: usize, wait: Duration) -> Result<EventPage, ServiceError> {
        let h = self.handle(run_id)?;
        let deadline = Instant::now() + wait;
        let mut slot = h.lock();
        loop {
            let page = slot.page(since_seq, limit.max(1));
            let left = deadline.saturating_duration_since(Instant::now());
            let settled = slot.state().is_none_or(|s| s.is_terminal()) || slot.corrupt.is_some();
            if !page.events.is_empty() || left.is_zero() || settled || self.stopping.load(Ordering::SeqCst) {
                return Ok(page);
            }
            slot = h.changed.wait_timeout(slot, left).expect("run lock poisoned").0;
        }
    }

    /// Dry-run simulation; nothing is stored.
    pub fn simulate(&self, req: &SimulateRequest) -> Result<Vec<Value>, ServiceError> {
        if req.window.end <= req.window.start {
            return Err(ServiceError::BadRequest("window must end after it starts".into()));
        }
        let model = req.model.clone().unwrap_or_else(CrowdModel::calibrated);
        model.validate().map_err(|e| ServiceError::Unprocessable(format!("model: {e}")))?;
        let events = simulate(&model, &req.tasks, req.window.start, req.window.end, req.seed);
        Ok(events
            .iter()
            .map(|e| public_event(&serde_json::json!({ "payload": e }).to_string())["payload"].clone())
            .collect())
    }
}

impl Drop for Service {
    fn drop(&mut self) {
        self.stopping.store(true, Ordering::SeqCst);
    }
}

/// Parses `attribute:fraction[:ttl_minutes]`.
pub fn parse_quota(s: &str) -> Result<QuotaSpec, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let (attribute, fraction, ttl) = match parts.as_slice() {
        [a, f] => (*a, *f, None),
        [a, f, t] => (*a, *f, Some(*t)),
        _ => return Err(format!("quota `{s}` is not attribute:fraction[:ttl_minutes]")),
    };
    let mut q = QuotaSpec::country(fraction.parse().map_err(|_| format!("bad fraction `{fraction}`"))?);
    q.attribute = attribute.to_string();
    if let Some(t) = ttl {
        q.ttl_minutes = t.parse().map_err(|_| format!("bad ttl `{t}`"))?;
    }
    Ok(q)
}

pub fn parse_action(s: &str) -> Result<Action, ServiceError> {
    match s.to_ascii_lowercase().as_str() {
        "launch" => Ok(Action::Launch),
        "pause" => Ok(Action::Pause),
        "resume" => Ok(Action::Resume),
        "abort" => Ok(Action::Abort),
        other => Err(ServiceError::BadRequest(format!("unknown action `{other}`"))),
    }
}

pub fn parse_timestamp(s: &str) -> Result<Timestamp, String> {
    parse_time(s).map_err(|e| format!("bad timestamp `{s}`: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_shorthands() {
        let p = parse_policy("between:same-task").unwrap();
        assert_eq!(p, EligibilityPolicy::new(Design::BetweenSubjects, ReturningRule::AllowSameTask).unwrap());
        assert_eq!(parse_policy("open").unwrap(), EligibilityPolicy::open());
        assert_eq!(
            parse_policy("within_subjects:same_task").unwrap(),
            EligibilityPolicy::new(Design::WithinSubjects, ReturningRule::AllowSameTask).unwrap()
        );
        assert!(parse_policy("within:deny-all").is_err());
        assert!(parse_policy("mixed").is_err());
        assert!(parse_policy("open:sometimes").is_err());
        let arg: PolicyArg = serde_json::from_str("\"between\"").unwrap();
        assert_eq!(arg.resolve().unwrap(), EligibilityPolicy::between_subjects(ReturningRule::AllowSameGroup));
    }

    #[test]
    fn quota_shorthand() {
        let q = parse_quota("country:0.2").unwrap();
        assert_eq!(q.attribute, "country");
        assert_eq!(q.cap_fraction, 0.2);
        assert_eq!(q.ttl_minutes, QuotaSpec::country(0.2).ttl_minutes);
        assert_eq!(parse_quota("country:0.15:45").unwrap().ttl_minutes, 45);
        assert!(parse_quota("country").is_err());
        assert!(parse_quota("country:x").is_err());
    }

    #[test]
    fn actions_and_times() {
        assert_eq!(parse_action("Launch").unwrap(), Action::Launch);
        assert!(matches!(parse_action("deploy"), Err(ServiceError::BadRequest(_))));
        assert_eq!(parse_timestamp(scenarios::START).unwrap(), sim_epoch());
        assert!(parse_timestamp("yesterday").is_err());
    }

    #[test]
    fn default_start_follows_the_schedule() {
        assert_eq!(default_start("sim", &Schedule::Always), sim_epoch());
        let s = scenarios::interleaved_schedule(parse_time("2024-02-01T13:00:00Z").unwrap());
        assert_eq!(default_start("sim", &s), parse_time("2024-02-01T00:00:00Z").unwrap());
    }

    #[test]
    fn deploy_request_rejects_unknown_fields() {
        assert!(serde_json::from_str::<DeployRequest>(r#"{"workflow_id":"w","sed":1}"#).is_err());
        let r: DeployRequest = serde_json::from_str(r#"{"workflow_id":"w","policy":"between"}"#).unwrap();
        assert_eq!(r.adapter, "sim");
    }
}
