//! File layout under the data directory:
//!
//! ```text
//! workflows/<id>.json        stored workflow documents
//! runs/<run_id>/run.json     run record
//! runs/<run_id>/events.jsonl hash-chained event log
//! requests/<key hash>.json   responses of idempotent requests
//! .lock                      held by the process that owns the directory
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::Utc;
use crowdflow_core::adapters::CrowdModel;
use crowdflow_core::canonical::canonical_pretty;
use crowdflow_core::eligibility::EligibilityPolicy;
use crowdflow_core::population::QuotaSpec;
use crowdflow_core::scheduler::Schedule;
use crowdflow_core::workflow::Violation;
use crowdflow_core::Timestamp;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("data directory {0} is in use by another process")]
    Locked(PathBuf),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WorkflowStatus {
    Valid,
    DraftInvalid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredWorkflow {
    pub workflow_id: String,
    pub version: u64,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
    pub status: WorkflowStatus,
    #[serde(default)]
    pub violations: Vec<Violation>,
    pub document: Value,
}

/// What a run was deployed with, beyond the frozen configuration in its
/// DEPLOYED event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub workflow_id: String,
    pub workflow_version: u64,
    pub adapter: String,
    pub seed: u64,
    pub policy: EligibilityPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quota: Option<QuotaSpec>,
    #[serde(default)]
    pub schedule: Schedule,
    /// Clock value at deployment.
    pub start: Timestamp,
    /// Simulated seconds per wall-clock second; unpaced when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed: Option<f64>,
    /// The simulator stops advancing this long after `start`.
    pub horizon_hours: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<CrowdModel>,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredResponse {
    pub key: String,
    pub status: u16,
    pub body: Value,
}

/// Result of reading a log file back.
#[derive(Debug, Clone, PartialEq)]
pub struct LogText {
    /// Complete lines.
    pub text: String,
    /// Bytes after the last newline, dropped as a torn write.
    pub torn_bytes: u64,
}

pub struct Store {
    root: PathBuf,
    _lock: File,
}

pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io(&tmp))?;
        f.write_all(bytes).map_err(io(&tmp))?;
        f.sync_all().map_err(io(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io(path))?;
    sync_dir(path.parent().expect("files live in a directory"))
}

fn sync_dir(dir: &Path) -> Result<(), StoreError> {
    File::open(dir).and_then(|d| d.sync_all()).map_err(io(dir))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = canonical_pretty(&serde_json::to_value(value).expect("records serialize"));
    s.push('\n');
    s.into_bytes()
}

impl Store {
    /// Opens (creating if needed) a data directory and takes its lock.
    pub fn open(root: &Path) -> Result<Self, StoreError> {
        for d in ["workflows", "runs", "requests"] {
            let p = root.join(d);
            fs::create_dir_all(&p).map_err(io(&p))?;
        }
        let lock_path = root.join(".lock");
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io(&lock_path))?;
        if lock.try_lock().is_err() {
            return Err(StoreError::Locked(root.to_path_buf()));
        }
        Ok(Self {
            root: root.to_path_buf(),
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn workflow_path(&self, id: &str) -> PathBuf {
        self.root.join("workflows").join(format!("{id}.json"))
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn log_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join("events.jsonl")
    }

    pub fn get_workflow(&self, id: &str) -> Result<Option<StoredWorkflow>, StoreError> {
        let p = self.workflow_path(id);
        if !p.exists() {
            return Ok(None);
        }
        read_json(&p).map(Some)
    }

    pub fn put_workflow(&self, wf: &StoredWorkflow) -> Result<(), StoreError> {
        write_atomic(&self.workflow_path(&wf.workflow_id), &pretty(wf))
    }

    pub fn delete_workflow(&self, id: &str) -> Result<bool, StoreError> {
        let p = self.workflow_path(id);
        match fs::remove_file(&p) {
            Ok(()) => {
                sync_dir(p.parent().expect("workflow dir"))?;
                Ok(true)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(false),
            Err(e) => Err(io(&p)(e)),
        }
    }

    pub fn list_workflows(&self) -> Result<Vec<StoredWorkflow>, StoreError> {
        let dir = self.root.join("workflows");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io(&dir))? {
            let p = entry.map_err(io(&dir))?.path();
            if p.extension().is_some_and(|e| e == "json") {
                out.push(read_json(&p)?);
            }
        }
        out.sort_by(|a: &StoredWorkflow, b| a.workflow_id.cmp(&b.workflow_id));
        Ok(out)
    }

    pub fn run_ids(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join("runs");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io(&dir))? {
            let entry = entry.map_err(io(&dir))?;
            if entry.path().join("run.json").exists() {
                out.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    /// Creates the run directory with its record and an empty log.
    pub fn create_run(&self, record: &RunRecord) -> Result<(), StoreError> {
        let dir = self.run_dir(&record.run_id);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let log = self.log_path(&record.run_id);
        File::create(&log).map_err(io(&log))?;
        write_atomic(&dir.join("run.json"), &pretty(record))?;
        sync_dir(&self.root.join("runs"))
    }

    pub fn read_record(&self, run_id: &str) -> Result<RunRecord, StoreError> {
        read_json(&self.run_dir(run_id).join("run.json"))
    }

    /// Reads a log, truncating a torn trailing line on disk.
    pub fn read_log(&self, run_id: &str) -> Result<LogText, StoreError> {
        let p = self.log_path(run_id);
        let bytes = fs::read(&p).map_err(io(&p))?;
        let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
        let torn_bytes = (bytes.len() - keep) as u64;
        if torn_bytes > 0 {
            self.truncate_log(run_id, keep as u64)?;
        }
        let text = String::from_utf8(bytes[..keep].to_vec()).map_err(|e| StoreError::Format {
            path: p.clone(),
            message: e.to_string(),
        })?;
        Ok(LogText { text, torn_bytes })
    }

    pub fn truncate_log(&self, run_id: &str, len: u64) -> Result<(), StoreError> {
        let p = self.log_path(run_id);
        let f = OpenOptions::new().write(true).open(&p).map_err(io(&p))?;
        f.set_len(len).map_err(io(&p))?;
        f.sync_all().map_err(io(&p))
    }

    /// Appends whole lines and syncs them to disk.
    pub fn append_lines(&self, run_id: &str, lines: &[String]) -> Result<(), StoreError> {
        if lines.is_empty() {
            return Ok(());
        }
        let p = self.log_path(run_id);
        let mut buf = String::new();
        for l in lines {
            buf.push_str(l);
            buf.push('\n');
        }
        let mut f = OpenOptions::new().append(true).open(&p).map_err(io(&p))?;
        f.write_all(buf.as_bytes()).map_err(io(&p))?;
        f.sync_data().map_err(io(&p))
    }

    fn request_path(&self, key: &str) -> PathBuf {
        let digest = hex::encode(Sha256::digest(key.as_bytes()));
        self.root.join("requests").join(format!("{digest}.json"))
    }

    pub fn get_response(&self, key: &str) -> Result<Option<StoredResponse>, StoreError> {
        let p = self.request_path(key);
        if !p.exists() {
            return Ok(None);
        }
        let r: StoredResponse = read_json(&p)?;
        Ok((r.key == key).then_some(r))
    }

    pub fn put_response(&self, response: &StoredResponse) -> Result<(), StoreError> {
        write_atomic(&self.request_path(&response.key), &pretty(response))
    }
}

pub fn now() -> Timestamp {
    let t = Utc::now();
    crowdflow_core::parse_time(&crowdflow_core::format_time(&t)).expect("own format parses")
}
