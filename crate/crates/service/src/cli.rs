//! The `crowdflow` command line. Commands work directly on the data
//! directory unless `--server` points them at a running `crowdflow serve`.
//!
//! Exit codes: 0 success, 1 validation failure or rejected request,
//! 2 transport or storage error.

use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Duration;
use clap::{Parser, Subcommand, ValueEnum};
use crowdflow_core::adapters::{CrowdModel, SimTaskSpec};
use crowdflow_core::analytics::{render_document, render_table};
use crowdflow_core::canonical::canonical_pretty;
use crowdflow_core::scenarios;
use crowdflow_core::scheduler::Schedule;
use crowdflow_core::workflow::Workflow;
use crowdflow_core::Timestamp;
use crowdflow_remote::{MappingProfile, RetryPolicy};
use serde_json::{json, Value};

use crate::api;
use crate::error::ServiceError;
use crate::runs::Adapters;
use crate::service::{
    check, parse_action, parse_quota, parse_timestamp, sim_epoch, DeployRequest, Service, SimWindow,
    SimulateRequest,
};

#[derive(Debug, Parser)]
#[command(name = "crowdflow", version, about = "Crowdsourcing experiment orchestration")]
pub struct Cli {
    /// Storage root.
    #[arg(long, env = "CROWDFLOW_DATA_DIR", default_value = "crowdflow-data", global = true)]
    pub data_dir: PathBuf,
    /// Base URL of a running server, e.g. http://127.0.0.1:8080.
    #[arg(long, global = true)]
    pub server: Option<String>,
    /// Mapping profile enabling the remote adapter.
    #[arg(long, env = "CROWDFLOW_REMOTE_PROFILE", global = true)]
    pub remote_profile: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RunAction {
    Launch,
    Pause,
    Resume,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Doc,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a workflow document.
    Validate { file: PathBuf },
    /// Store a workflow document and deploy a run of it.
    Deploy {
        file: PathBuf,
        #[arg(long, default_value = "sim")]
        adapter: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// open, between or within, optionally with :deny-all, :same-task or :same-group.
        #[arg(long, default_value = "open")]
        policy: String,
        /// attribute:cap_fraction[:ttl_minutes], e.g. country:0.2.
        #[arg(long)]
        quota: Option<String>,
        /// JSON schedule document.
        #[arg(long)]
        schedule: Option<PathBuf>,
        /// Clock value at deployment (RFC 3339).
        #[arg(long)]
        start: Option<String>,
        /// Simulated seconds per wall-clock second when served.
        #[arg(long)]
        speed: Option<f64>,
        #[arg(long)]
        horizon_hours: Option<u64>,
        /// JSON crowd model for the simulator.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        request_id: Option<String>,
    },
    /// Apply a lifecycle action. Without --server, launch and resume also
    /// drive the run until it completes or needs another action.
    Run {
        id: String,
        action: RunAction,
        #[arg(long)]
        no_drive: bool,
    },
    /// Print a run's lifecycle state and progress.
    Status { id: String },
    /// List runs.
    Runs,
    /// Print a run's bias report; both forms unless --format is given.
    Report {
        id: String,
        #[arg(long, value_enum)]
        format: Option<ReportFormat>,
    },
    /// Dry-run the simulator over every task of a workflow, printing events
    /// as JSON lines.
    Simulate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 24)]
        hours: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Defaults to the 16-task reference experiment.
        #[arg(long)]
        workflow: Option<PathBuf>,
        #[arg(long)]
        start: Option<String>,
    },
    /// Print the calibrated crowd model.
    Model,
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
    },
}

#[derive(Debug)]
pub enum Failure {
    /// Exit 1.
    Rejected(String),
    /// Exit 2.
    Transport(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Rejected(_) => 1,
            Failure::Transport(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Rejected(m) | Failure::Transport(m) => f.write_str(m),
        }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Store(_) | ServiceError::Adapter(_) | ServiceError::Internal(_) => Failure::Transport(e.to_string()),
            ServiceError::Invalid(v) => Failure::Rejected(v.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n")),
            e => Failure::Rejected(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

// Output goes through these so a closed pipe (`| head`) ends quietly.
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

macro_rules! say_raw {
    ($($t:tt)*) => {{
        use std::io::Write;
        let _ = write!(std::io::stdout().lock(), $($t)*);
    }};
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Transport(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read(path)?).map_err(|e| Failure::Rejected(format!("{}: {e}", path.display())))
}

fn pretty(v: &impl serde::Serialize) -> String {
    canonical_pretty(&serde_json::to_value(v).expect("output serializes"))
}

/// A minimal client for `--server` mode.
struct Client {
    base: String,
    agent: ureq::Agent,
}

impl Client {
    fn new(base: &str) -> Self {
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self {
            base: base.trim_end_matches('/').to_string(),
            agent,
        }
    }

    fn send(&self, method: &str, path: &str, body: Option<&Value>, key: Option<&str>) -> Result<String, Failure> {
        let url = format!("{}{path}", self.base);
        let transport = |e: ureq::Error| Failure::Transport(format!("{url}: {e}"));
        let resp = match method {
            "GET" => self.agent.get(&url).call(),
            "PUT" => {
                let mut r = self.agent.put(&url);
                if let Some(k) = key {
                    r = r.header(api::REQUEST_ID_HEADER, k);
                }
                r.send(body.map(Value::to_string).unwrap_or_default())
            }
            _ => {
                let mut r = self.agent.post(&url);
                if let Some(k) = key {
                    r = r.header(api::REQUEST_ID_HEADER, k);
                }
                r.send_json(body.cloned().unwrap_or(Value::Null))
            }
        };
        let mut resp = resp.map_err(transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(transport)?;
        match status {
            200..=299 => Ok(text),
            400..=499 => {
                let v: Value = serde_json::from_str(&text).unwrap_or(Value::String(text.clone()));
                let msg = match v.get("violations").and_then(Value::as_array) {
                    Some(vs) => vs
                        .iter()
                        .map(|x| format!("{}({})", x["code"].as_str().unwrap_or(""), x["element"].as_str().unwrap_or("")))
                        .collect::<Vec<_>>()
                        .join("\n"),
                    None => v.get("message").and_then(Value::as_str).unwrap_or(&text).to_string(),
                };
                Err(Failure::Rejected(msg))
            }
            _ => Err(Failure::Transport(format!("{url}: HTTP {status}: {text}"))),
        }
    }

    fn json(&self, method: &str, path: &str, body: Option<&Value>, key: Option<&str>) -> Result<Value, Failure> {
        let text = self.send(method, path, body, key)?;
        serde_json::from_str(&text).map_err(|e| Failure::Transport(format!("bad response: {e}")))
    }
}

fn adapters(cli: &Cli) -> Result<Adapters, Failure> {
    let remote = match &cli.remote_profile {
        Some(p) => Some(MappingProfile::load(p).map_err(|e| Failure::Rejected(e.to_string()))?),
        None => None,
    };
    Ok(Adapters {
        remote,
        retry: RetryPolicy::default(),
    })
}

fn open(cli: &Cli) -> Result<Arc<Service>, Failure> {
    Service::open(&cli.data_dir, adapters(cli)?).map_err(|e| match e {
        ServiceError::Store(crate::store::StoreError::Locked(_)) => {
            Failure::Transport(format!("{e}; pass --server to talk to the running server"))
        }
        e => e.into(),
    })
}

fn summary_line(status: &Value) -> String {
    format!(
        "{} {} ({}/{} judgments)",
        status["run_id"].as_str().unwrap_or("?"),
        status["state"].as_str().unwrap_or("?"),
        status["judgments"],
        status["judgments_target"]
    )
}

fn validate(file: &Path) -> Outcome {
    let (_, violations) = check(&read(file)?)?;
    if violations.is_empty() {
        say!("OK");
        Ok(())
    } else {
        for v in &violations {
            say!("{v}");
        }
        Err(Failure::Rejected(format!("{} violation(s)", violations.len())))
    }
}

#[allow(clippy::too_many_arguments)]
fn deploy_request(
    seed: u64,
    adapter: &str,
    policy: &str,
    quota: &Option<String>,
    schedule: &Option<PathBuf>,
    start: &Option<String>,
    speed: Option<f64>,
    horizon_hours: Option<u64>,
    model: &Option<PathBuf>,
    request_id: &Option<String>,
) -> Result<Value, Failure> {
    let mut req = json!({ "adapter": adapter, "seed": seed, "policy": policy });
    if let Some(q) = quota {
        req["quota"] = serde_json::to_value(parse_quota(q).map_err(Failure::Rejected)?).expect("quota serializes");
    }
    if let Some(p) = schedule {
        let s: Schedule = read_json(p)?;
        req["schedule"] = serde_json::to_value(s).expect("schedule serializes");
    }
    if let Some(s) = start {
        parse_timestamp(s).map_err(Failure::Rejected)?;
        req["start"] = json!(s);
    }
    if let Some(s) = speed {
        req["speed"] = json!(s);
    }
    if let Some(h) = horizon_hours {
        req["horizon_hours"] = json!(h);
    }
    if let Some(p) = model {
        let m: CrowdModel = read_json(p)?;
        req["model"] = serde_json::to_value(m).expect("model serializes");
    }
    if let Some(r) = request_id {
        req["request_id"] = json!(r);
    }
    Ok(req)
}

fn simulate(model: &Option<PathBuf>, hours: u64, seed: u64, workflow: &Option<PathBuf>, start: &Option<String>) -> Outcome {
    let model = match model {
        Some(p) => Some(read_json::<CrowdModel>(p)?),
        None => None,
    };
    let wf: Workflow = match workflow {
        Some(p) => {
            let (wf, violations) = check(&read(p)?)?;
            match wf {
                Some(w) if violations.is_empty() => w,
                _ => return Err(ServiceError::Invalid(violations).into()),
            }
        }
        None => scenarios::sequential_workflow(),
    };
    let start: Timestamp = match start {
        Some(s) => parse_timestamp(s).map_err(Failure::Rejected)?,
        None => sim_epoch(),
    };
    let tasks = wf
        .nodes
        .iter()
        .map(|n| SimTaskSpec {
            node: n.clone(),
            units: wf.input_units.clone(),
        })
        .collect();
    let req = SimulateRequest {
        model,
        tasks,
        window: SimWindow {
            start,
            end: start + Duration::hours(hours as i64),
        },
        seed,
    };
    let dir = tempdir_for_dry_run()?;
    let svc = Service::open(dir.path(), Adapters::default())?;
    for ev in svc.simulate(&req)? {
        say!("{}", serde_json::to_string(&ev).expect("events serialize"));
    }
    Ok(())
}

fn tempdir_for_dry_run() -> Result<tempfile::TempDir, Failure> {
    tempfile::tempdir().map_err(|e| Failure::Transport(format!("temporary directory: {e}")))
}

fn serve(cli: &Cli, listen: SocketAddr) -> Outcome {
    let svc = open(cli)?;
    svc.start_driving();
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Transport(e.to_string()))?;
    let result = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(listen).await?;
        eprintln!("listening on {}", listener.local_addr()?);
        api::serve(Arc::clone(&svc), listener).await
    });
    svc.shutdown();
    result.map_err(|e| Failure::Transport(e.to_string()))
}

fn execute(cli: &Cli) -> Outcome {
    let client = cli.server.as_deref().map(Client::new);
    match &cli.command {
        Command::Validate { file } => validate(file),
        Command::Model => {
            say!("{}", pretty(&CrowdModel::calibrated()));
            Ok(())
        }
        Command::Simulate {
            model,
            hours,
            seed,
            workflow,
            start,
        } => simulate(model, *hours, *seed, workflow, start),
        Command::Serve { listen } => serve(cli, *listen),
        Command::Deploy {
            file,
            adapter,
            seed,
            policy,
            quota,
            schedule,
            start,
            speed,
            horizon_hours,
            model,
            request_id,
        } => {
            let text = read(file)?;
            let doc: Value = serde_json::from_str(&text).map_err(|e| Failure::Rejected(format!("{}: {e}", file.display())))?;
            let id = doc
                .get("workflow_id")
                .and_then(Value::as_str)
                .ok_or_else(|| Failure::Rejected("document has no workflow_id".into()))?
                .to_string();
            let mut req = deploy_request(
                *seed, adapter, policy, quota, schedule, start, *speed, *horizon_hours, model, request_id,
            )?;
            req["workflow_id"] = json!(id);
            let status = match &client {
                Some(c) => {
                    let key = request_id.as_ref().map(|r| format!("{r}-workflow"));
                    c.json("PUT", &format!("/workflows/{id}"), Some(&doc), key.as_deref())?;
                    c.json("POST", "/runs", Some(&req), None)?
                }
                None => {
                    let svc = open(cli)?;
                    let stored = svc.put_workflow(&id, &text)?;
                    if !stored.violations.is_empty() {
                        return Err(ServiceError::Invalid(stored.violations).into());
                    }
                    let req: DeployRequest = serde_json::from_value(req).expect("request is well formed");
                    let key = req.request_id.as_ref().map(|r| format!("POST /runs {r}"));
                    let (code, body) = svc.idempotent(key, || {
                        Ok((201, serde_json::to_value(svc.deploy(req)?).expect("status serializes")))
                    })?;
                    if code >= 400 {
                        return Err(Failure::Rejected(body["message"].as_str().unwrap_or("rejected").to_string()));
                    }
                    body
                }
            };
            say!("{}", status["run_id"].as_str().unwrap_or_default());
            Ok(())
        }
        Command::Run { id, action, no_drive } => {
            let name = format!("{action:?}").to_ascii_lowercase();
            let status = match &client {
                Some(c) => c.json("POST", &format!("/runs/{id}/actions"), Some(&json!({ "action": name })), None)?,
                None => {
                    let svc = open(cli)?;
                    let mut s = svc.act(id, parse_action(&name)?)?;
                    if !no_drive && matches!(action, RunAction::Launch | RunAction::Resume) {
                        s = svc.drive(id)?;
                    }
                    serde_json::to_value(s).expect("status serializes")
                }
            };
            say!("{}", summary_line(&status));
            Ok(())
        }
        Command::Status { id } => {
            let status = match &client {
                Some(c) => c.json("GET", &format!("/runs/{id}"), None, None)?,
                None => serde_json::to_value(open(cli)?.status(id)?).expect("status serializes"),
            };
            say!("{}", canonical_pretty(&status));
            Ok(())
        }
        Command::Runs => {
            let runs = match &client {
                Some(c) => c.json("GET", "/runs", None, None)?,
                None => serde_json::to_value(open(cli)?.list_runs()).expect("runs serialize"),
            };
            for r in runs.as_array().into_iter().flatten() {
                say!(
                    "{}\t{}\t{}\t{}",
                    r["run_id"].as_str().unwrap_or_default(),
                    r["state"].as_str().unwrap_or_default(),
                    r["workflow_id"].as_str().unwrap_or_default(),
                    r["adapter"].as_str().unwrap_or_default()
                );
            }
            Ok(())
        }
        Command::Report { id, format } => {
            let (doc, table) = match &client {
                Some(c) => (
                    c.send("GET", &format!("/runs/{id}/report?format=doc"), None, None)?,
                    c.send("GET", &format!("/runs/{id}/report?format=table"), None, None)?,
                ),
                None => {
                    let r = open(cli)?.report(id)?;
                    (render_document(&r), render_table(&r))
                }
            };
            match format {
                Some(ReportFormat::Doc) => say!("{}", doc.trim_end()),
                Some(ReportFormat::Table) => say_raw!("{table}"),
                None => {
                    say!("{}", doc.trim_end());
                    say!("");
                    say_raw!("{table}");
                }
            }
            Ok(())
        }
    }
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {f}");
            f.code()
        }
    }
}
