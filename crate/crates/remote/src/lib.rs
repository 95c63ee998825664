//! A generic remote-platform adapter speaking the adapter contract over HTTP.
//!
//! Commands become requests laid out by a [`MappingProfile`]. Every request
//! carries an `Idempotency-Key` derived from the command and its issue time,
//! so a retried or re-issued command is applied once by a platform honoring
//! the header. Rate limits (429) and server errors are retried with
//! exponential backoff and full jitter. Worker events are pulled by polling
//! each created task and deduplicated by their platform event id.
//!
//! PAUSE is best effort: events the platform produced before it honored the
//! pause are still delivered.

mod profile;
mod retry;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::time::{Duration, Instant};

use crowdflow_core::adapters::{Ack, Adapter, AdapterCommand, AdapterError, AdapterEvent, AdapterEventKind};
use crowdflow_core::canonical::to_canonical_line;
use crowdflow_core::{format_time, Timestamp};
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use profile::{MappingProfile, PathTemplates, ProfileError};
pub use retry::RetryPolicy;

/// Header carrying the command id.
pub const IDEMPOTENCY_HEADER: &str = "Idempotency-Key";

#[derive(Debug, Deserialize)]
struct PolledEvent {
    id: String,
    #[serde(flatten)]
    event: AdapterEvent,
}

#[derive(Debug, Deserialize)]
struct PollPage {
    #[serde(default)]
    events: Vec<PolledEvent>,
    #[serde(default)]
    cursor: Option<String>,
}

enum Method {
    Get,
    Post,
}

pub struct RemoteAdapter {
    profile: MappingProfile,
    credential: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
    /// Minimum wall time between two polls of the platform.
    poll_interval: Duration,
    last_poll: Option<Instant>,
    acked: HashMap<String, Ack>,
    /// Task ref to node id, in creation order.
    tasks: BTreeMap<String, String>,
    cursors: HashMap<String, String>,
    seen: HashSet<String>,
    buffer: Vec<AdapterEvent>,
}

/// Stable id of a command issued at `at`.
pub fn command_id(at: &Timestamp, command: &AdapterCommand) -> String {
    let mut h = Sha256::new();
    h.update(format_time(at).as_bytes());
    h.update(b"\n");
    h.update(to_canonical_line(command).as_bytes());
    hex::encode(&h.finalize()[..16])
}

impl RemoteAdapter {
    /// Reads the credential from the profile's environment variable.
    pub fn new(profile: MappingProfile, retry: RetryPolicy) -> Self {
        let credential = std::env::var(&profile.credential_env).ok();
        Self::with_credential(profile, retry, credential)
    }

    pub fn with_credential(profile: MappingProfile, retry: RetryPolicy, credential: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self {
            profile,
            credential,
            retry,
            agent,
            poll_interval: Duration::from_secs(2),
            last_poll: None,
            acked: HashMap::new(),
            tasks: BTreeMap::new(),
            cursors: HashMap::new(),
            seen: HashSet::new(),
            buffer: Vec::new(),
        }
    }

    pub fn with_poll_interval(mut self, interval: Duration) -> Self {
        self.poll_interval = interval;
        self
    }

    /// Re-attaches tasks created before a restart.
    pub fn adopt(&mut self, task: &str, node_id: &str) {
        self.tasks.insert(task.to_string(), node_id.to_string());
    }

    pub fn profile(&self) -> &MappingProfile {
        &self.profile
    }

    fn template<'a>(&self, template: &'a Option<String>, command: &str) -> Result<&'a str, AdapterError> {
        template.as_deref().ok_or_else(|| AdapterError::Unsupported {
            adapter: self.profile.name.clone(),
            command: command.into(),
        })
    }

    fn known(&self, task: &str) -> Result<(), AdapterError> {
        if self.tasks.contains_key(task) {
            Ok(())
        } else {
            Err(AdapterError::UnknownTask(task.into()))
        }
    }

    fn request(
        &self,
        method: Method,
        url: &str,
        body: Option<&Value>,
        key: Option<&str>,
        command: &str,
    ) -> Result<Value, AdapterError> {
        let credential = self
            .credential
            .as_deref()
            .ok_or_else(|| AdapterError::Auth(format!("credential variable {} is unset", self.profile.credential_env)))?;
        let auth = format!("{}{}", self.profile.auth_prefix, credential);
        let mut rng = rand::rng();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let sent = match method {
                Method::Get => {
                    let mut r = self.agent.get(url).header(&self.profile.auth_header, &auth);
                    if let Some(k) = key {
                        r = r.header(IDEMPOTENCY_HEADER, k);
                    }
                    r.call()
                }
                Method::Post => {
                    let mut r = self.agent.post(url).header(&self.profile.auth_header, &auth);
                    if let Some(k) = key {
                        r = r.header(IDEMPOTENCY_HEADER, k);
                    }
                    r.send_json(body.cloned().unwrap_or(Value::Null))
                }
            };
            let (retryable, message, wait_hint) = match sent {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    match status {
                        200..=299 => {
                            let text = resp.body_mut().read_to_string().unwrap_or_default();
                            if text.trim().is_empty() {
                                return Ok(Value::Null);
                            }
                            return serde_json::from_str(&text).map_err(|e| AdapterError::Mapping {
                                command: command.into(),
                                message: format!("response is not JSON: {e}"),
                            });
                        }
                        401 | 403 => return Err(AdapterError::Auth(format!("{command}: HTTP {status}"))),
                        429 | 500..=599 => {
                            let hint = resp
                                .headers()
                                .get("retry-after")
                                .and_then(|v| v.to_str().ok())
                                .and_then(|v| v.trim().parse::<u64>().ok())
                                .map(Duration::from_secs);
                            (true, format!("HTTP {status}"), hint)
                        }
                        _ => {
                            let text = resp.body_mut().read_to_string().unwrap_or_default();
                            return Err(AdapterError::Mapping {
                                command: command.into(),
                                message: format!("HTTP {status}: {}", text.trim()),
                            });
                        }
                    }
                }
                Err(e) => (true, e.to_string(), None),
            };
            if attempt >= self.retry.max_attempts {
                return Err(AdapterError::Transport {
                    attempts: attempt,
                    retryable,
                    message,
                });
            }
            let mut wait = self.retry.delay(attempt, &mut rng);
            if let Some(h) = wait_hint {
                wait = wait.max(h.min(Duration::from_millis(self.retry.max_delay_ms)));
            }
            std::thread::sleep(wait);
        }
    }

    fn post(&self, url: &str, body: &Value, key: &str, command: &str) -> Result<Value, AdapterError> {
        self.request(Method::Post, url, Some(body), Some(key), command)
    }

    fn poll(&mut self) -> Result<(), AdapterError> {
        let tasks: Vec<String> = self.tasks.keys().cloned().collect();
        for task in tasks {
            let mut url = self.profile.url(&self.profile.paths.poll, &task);
            if let Some(c) = self.cursors.get(&task) {
                url = format!("{url}?cursor={c}");
            }
            let page = self.request(Method::Get, &url, None, None, "POLL")?;
            let page: PollPage = serde_json::from_value(page).map_err(|e| AdapterError::Mapping {
                command: "POLL".into(),
                message: e.to_string(),
            })?;
            for p in page.events {
                if self.seen.insert(p.id) {
                    self.buffer.push(p.event);
                }
            }
            if let Some(c) = page.cursor {
                self.cursors.insert(task, c);
            }
        }
        self.buffer.sort_by_key(|e| e.time);
        Ok(())
    }

    fn create(&mut self, at: Timestamp, command: &AdapterCommand, key: &str) -> Result<Ack, AdapterError> {
        let AdapterCommand::CreateTask { node, units } = command else {
            unreachable!("create is only called for CREATE_TASK")
        };
        let body = json!({
            "external_id": node.node_id,
            "title": node.title,
            "instructions": node.instructions,
            "questions": node.question_schema,
            "judgments_per_unit": node.judgments_per_unit,
            "reward_per_judgment": node.reward_per_judgment,
        });
        let url = self.profile.url(&self.profile.paths.create, "");
        let resp = self.post(&url, &body, key, "CREATE_TASK")?;
        let task = match resp.get("id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => {
                return Err(AdapterError::Mapping {
                    command: "CREATE_TASK".into(),
                    message: "response has no job id".into(),
                })
            }
        };
        let rows: Vec<Value> = units
            .iter()
            .map(|u| json!({ "unit_id": u.unit_id, "payload": u.payload, "gold_answer": u.gold_answer }))
            .collect();
        let url = self.profile.url(&self.profile.paths.rows, &task);
        self.post(&url, &json!({ "rows": rows }), &format!("{key}-rows"), "CREATE_TASK")?;
        self.tasks.insert(task.clone(), node.node_id.clone());
        self.buffer.push(AdapterEvent {
            time: at,
            kind: AdapterEventKind::TaskCreated {
                node_id: node.node_id.clone(),
                task: task.clone(),
            },
        });
        Ok(Ack { task: Some(task) })
    }
}

impl Adapter for RemoteAdapter {
    fn name(&self) -> &str {
        &self.profile.name
    }

    fn execute(&mut self, at: Timestamp, command: &AdapterCommand) -> Result<Ack, AdapterError> {
        let key = command_id(&at, command);
        if let Some(ack) = self.acked.get(&key) {
            return Ok(ack.clone());
        }
        let kind = command.kind();
        let paths = self.profile.paths.clone();
        let ack = match command {
            AdapterCommand::CreateTask { .. } => self.create(at, command, &key)?,
            AdapterCommand::Launch { task }
            | AdapterCommand::Pause { task }
            | AdapterCommand::Resume { task }
            | AdapterCommand::Cancel { task }
            | AdapterCommand::Hide { task } => {
                self.known(task)?;
                let template = match command {
                    AdapterCommand::Launch { .. } => paths.launch.as_str(),
                    AdapterCommand::Pause { .. } => paths.pause.as_str(),
                    AdapterCommand::Resume { .. } => paths.resume.as_str(),
                    AdapterCommand::Cancel { .. } => paths.cancel.as_str(),
                    _ => self.template(&paths.hide, kind)?,
                };
                self.post(&self.profile.url(template, task), &json!({}), &key, kind)?;
                Ack::default()
            }
            AdapterCommand::AssignUnit { task, worker, unit_id } => {
                self.known(task)?;
                let template = self.template(&paths.assign, kind)?;
                let body = json!({ "worker": worker, "unit_id": unit_id });
                self.post(&self.profile.url(template, task), &body, &key, kind)?;
                Ack::default()
            }
            AdapterCommand::RejectWorker { task, worker, reason } => {
                self.known(task)?;
                let template = self.template(&paths.reject, kind)?;
                let body = json!({ "worker": worker, "reason": reason });
                self.post(&self.profile.url(template, task), &body, &key, kind)?;
                Ack::default()
            }
        };
        self.acked.insert(key, ack.clone());
        Ok(ack)
    }

    fn next_event(&mut self, until: Timestamp) -> Result<Option<AdapterEvent>, AdapterError> {
        let ready = |b: &[AdapterEvent]| b.first().is_some_and(|e| e.time <= until);
        if !ready(&self.buffer) && !self.tasks.is_empty() {
            let due = self.last_poll.is_none_or(|t| t.elapsed() >= self.poll_interval);
            if due {
                self.last_poll = Some(Instant::now());
                self.poll()?;
            }
        }
        if ready(&self.buffer) {
            Ok(Some(self.buffer.remove(0)))
        } else {
            Ok(None)
        }
    }
}
