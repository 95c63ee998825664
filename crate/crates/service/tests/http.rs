mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{cyclic_workflow, small_workflow};
use crowdflow_service::api::{router, REQUEST_ID_HEADER};
use crowdflow_service::{Adapters, Service};
use serde_json::{json, Value};

struct Server {
    base: String,
    agent: ureq::Agent,
    _svc: Arc<Service>,
    _dir: tempfile::TempDir,
}

impl Server {
    fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let svc = Service::open(dir.path(), Adapters::default()).unwrap();
        svc.start_driving();
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let app = router(Arc::clone(&svc));
        std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async {
                let l = tokio::net::TcpListener::from_std(listener).unwrap();
                axum::serve(l, app).await.unwrap();
            });
        });
        let agent = ureq::Agent::config_builder().http_status_as_error(false).build().into();
        Self {
            base,
            agent,
            _svc: svc,
            _dir: dir,
        }
    }

    fn call(&self, method: &str, path: &str, body: Option<Value>, key: Option<&str>) -> (u16, String) {
        let url = format!("{}{path}", self.base);
        let resp = match method {
            "GET" => self.agent.get(&url).call(),
            "DELETE" => self.agent.delete(&url).call(),
            "PUT" => {
                let mut r = self.agent.put(&url);
                if let Some(k) = key {
                    r = r.header(REQUEST_ID_HEADER, k);
                }
                r.send(body.unwrap_or(Value::Null).to_string())
            }
            _ => {
                let mut r = self.agent.post(&url).header("content-type", "application/json");
                if let Some(k) = key {
                    r = r.header(REQUEST_ID_HEADER, k);
                }
                r.send(body.map(|b| b.to_string()).unwrap_or_default())
            }
        };
        let mut resp = resp.unwrap();
        let status = resp.status().as_u16();
        (status, resp.body_mut().read_to_string().unwrap())
    }

    fn json(&self, method: &str, path: &str, body: Option<Value>, key: Option<&str>) -> (u16, Value) {
        let (s, text) = self.call(method, path, body, key);
        (s, serde_json::from_str(&text).unwrap_or(Value::String(text)))
    }

    fn wait_for_state(&self, run: &str, state: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(60);
        loop {
            let (_, st) = self.json("GET", &format!("/runs/{run}"), None, None);
            if st["state"] == state {
                return st;
            }
            assert!(Instant::now() < deadline, "run stuck in {}", st["state"]);
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

#[test]
fn workflow_crud_and_validation() {
    let s = Server::start();
    let (code, stored) = s.json("PUT", "/workflows/small", Some(small_workflow("small", 4)), None);
    assert_eq!(code, 200);
    assert_eq!(stored["valid"], true);
    assert_eq!(stored["version"], 1);
    let (_, again) = s.json("PUT", "/workflows/small", Some(small_workflow("small", 6)), None);
    assert_eq!(again["version"], 2);

    let (code, bad) = s.json("PUT", "/workflows/loop", Some(cyclic_workflow("loop")), None);
    assert_eq!(code, 200);
    assert_eq!(bad["valid"], false);
    assert_eq!(bad["status"], "DRAFT_INVALID");
    let (_, v) = s.json("POST", "/workflows/loop/validate", None, None);
    assert!(v["violations"].as_array().unwrap().iter().any(|x| x["code"] == "CYCLE"));

    let (_, list) = s.json("GET", "/workflows", None, None);
    assert_eq!(list.as_array().unwrap().len(), 2);
    assert_eq!(s.json("DELETE", "/workflows/loop", None, None).0, 200);
    assert_eq!(s.json("GET", "/workflows/loop", None, None).0, 404);
    assert_eq!(s.json("PUT", "/workflows/..", Some(small_workflow("x", 2)), None).0, 400);
}

#[test]
fn deploy_errors_map_to_status_codes() {
    let s = Server::start();
    s.json("PUT", "/workflows/loop", Some(cyclic_workflow("loop")), None);
    let (code, body) = s.json("POST", "/runs", Some(json!({ "workflow_id": "loop" })), None);
    assert_eq!(code, 422);
    assert_eq!(body["error"], "INVALID_WORKFLOW");
    assert!(body["violations"].as_array().unwrap().iter().any(|x| x["code"] == "CYCLE"));

    let (code, body) = s.json("POST", "/runs", Some(json!({ "workflow": cyclic_workflow("inline") })), None);
    assert_eq!((code, body["error"].as_str()), (422, Some("INVALID_WORKFLOW")));
    assert_eq!(s.json("POST", "/runs", Some(json!({ "workflow_id": "absent" })), None).0, 404);
    assert_eq!(s.json("POST", "/runs", Some(json!({ "workflow_id": "x", "bogus": 1 })), None).0, 400);
    assert_eq!(
        s.json("POST", "/runs", Some(json!({ "workflow": small_workflow("s", 4), "adapter": "mturk" })), None).0,
        400
    );
    assert_eq!(s.json("GET", "/runs/run-0042", None, None).0, 404);
    assert_eq!(s.json("GET", "/nowhere", None, None).0, 404);
}

#[test]
fn repeated_deploy_with_a_request_id_creates_one_run() {
    let s = Server::start();
    s.json("PUT", "/workflows/small", Some(small_workflow("small", 4)), None);
    let req = json!({ "workflow_id": "small", "seed": 3 });
    let (c1, a) = s.json("POST", "/runs", Some(req.clone()), Some("deploy-1"));
    let (c2, b) = s.json("POST", "/runs", Some(req.clone()), Some("deploy-1"));
    assert_eq!((c1, c2), (201, 201));
    assert_eq!(a["run_id"], b["run_id"]);
    let mut in_body = req.clone();
    in_body["request_id"] = json!("deploy-2");
    let (_, c) = s.json("POST", "/runs", Some(in_body.clone()), None);
    let (_, d) = s.json("POST", "/runs", Some(in_body), None);
    assert_eq!(c["run_id"], d["run_id"]);
    assert_ne!(a["run_id"], c["run_id"]);
    let (_, runs) = s.json("GET", "/runs", None, None);
    assert_eq!(runs.as_array().unwrap().len(), 2);
}

#[test]
fn a_served_run_streams_events_and_reports() {
    let s = Server::start();
    s.json("PUT", "/workflows/small", Some(small_workflow("small", 10)), None);
    let (_, st) = s.json("POST", "/runs", Some(json!({ "workflow_id": "small", "seed": 5, "speed": 200000.0 })), None);
    let run = st["run_id"].as_str().unwrap().to_string();
    let (code, body) = s.json("GET", &format!("/runs/{run}/report"), None, None);
    assert_eq!((code, body["error"].as_str()), (409, Some("NO_JUDGMENTS")));

    let (_, head) = s.json("GET", &format!("/runs/{run}/events?since_seq=0"), None, None);
    let since = head["next_since_seq"].as_u64().unwrap();
    let (code, launched) = s.json("POST", &format!("/runs/{run}/actions"), Some(json!({ "action": "launch" })), None);
    assert_eq!(code, 200);
    assert_ne!(launched["state"], "DEPLOYED");
    let (_, page) = s.json("GET", &format!("/runs/{run}/events?since_seq={since}&wait_ms=5000"), None, None);
    assert!(!page["events"].as_array().unwrap().is_empty());
    assert_eq!(page["events"][0]["seq"].as_u64().unwrap(), since + 1);

    let done = s.wait_for_state(&run, "COMPLETED");
    assert_eq!(done["judgments"], done["judgments_target"]);
    let (code, body) = s.json("POST", &format!("/runs/{run}/actions"), Some(json!({ "action": "resume" })), None);
    assert_eq!((code, body["error"].as_str()), (409, Some("ILLEGAL_TRANSITION")));
    assert_eq!(s.json("POST", &format!("/runs/{run}/actions"), Some(json!({ "action": "explode" })), None).0, 400);

    let (code, table) = s.call("GET", &format!("/runs/{run}/report?format=table"), None, None);
    assert_eq!(code, 200);
    assert!(table.starts_with("group_id,label,class,"));
    let (_, doc) = s.json("GET", &format!("/runs/{run}/report"), None, None);
    assert_eq!(doc["judgments"], done["judgments"]);
    assert_eq!(s.call("GET", &format!("/runs/{run}/report?format=pdf"), None, None).0, 400);

    let head = done["head_seq"].as_u64().unwrap();
    let (code, past) = s.json("GET", &format!("/runs/{run}/events?since_seq={}&wait_ms=100", head + 10), None, None);
    assert_eq!(code, 200);
    assert!(past["events"].as_array().unwrap().is_empty());
    assert_eq!(past["next_since_seq"].as_u64().unwrap(), head);
}

#[test]
fn pause_freezes_and_resume_continues() {
    let s = Server::start();
    s.json("PUT", "/workflows/small", Some(small_workflow("small", 40)), None);
    let (_, st) = s.json("POST", "/runs", Some(json!({ "workflow_id": "small", "seed": 8, "speed": 3600.0 })), None);
    let run = st["run_id"].as_str().unwrap().to_string();
    s.json("POST", &format!("/runs/{run}/actions"), Some(json!({ "action": "launch" })), None);
    std::thread::sleep(Duration::from_millis(300));
    let (code, paused) = s.json("POST", &format!("/runs/{run}/actions"), Some(json!({ "action": "pause" })), None);
    assert_eq!(code, 200);
    assert_eq!(paused["state"], "PAUSED");
    std::thread::sleep(Duration::from_millis(300));
    let (_, later) = s.json("GET", &format!("/runs/{run}"), None, None);
    assert_eq!(later["head_seq"], paused["head_seq"]);
    assert_eq!(later["clock"], paused["clock"]);
    let (code, resumed) = s.json("POST", &format!("/runs/{run}/actions"), Some(json!({ "action": "resume" })), None);
    assert_eq!((code, resumed["state"].as_str()), (200, Some("RUNNING")));
    let (code, aborted) = s.json("POST", &format!("/runs/{run}/actions"), Some(json!({ "action": "abort" })), None);
    assert_eq!((code, aborted["state"].as_str()), (200, Some("ABORTED")));
}

#[test]
fn simulate_is_a_dry_run_with_hashed_fingerprints() {
    let s = Server::start();
    let wf = small_workflow("small", 4);
    let tasks = json!([ { "node": wf["nodes"][0], "units": wf["input_units"] } ]);
    let req = json!({
        "tasks": tasks,
        "window": { "start": "2024-01-01T00:00:00Z", "end": "2024-01-01T06:00:00Z" },
        "seed": 4,
    });
    let (code, body) = s.json("POST", "/simulate", Some(req.clone()), None);
    assert_eq!(code, 200);
    let events = body["events"].as_array().unwrap();
    assert!(events.iter().any(|e| e["kind"] == "WORKER_ARRIVAL"));
    for e in events {
        assert!(e.get("fingerprint").is_none());
    }
    assert_eq!(s.json("POST", "/simulate", Some(req), None).1, body);
    let (_, runs) = s.json("GET", "/runs", None, None);
    assert!(runs.as_array().unwrap().is_empty());
    let (code, _) = s.json(
        "POST",
        "/simulate",
        Some(json!({ "tasks": tasks, "window": { "start": "2024-01-02T00:00:00Z", "end": "2024-01-01T00:00:00Z" } })),
        None,
    );
    assert_eq!(code, 400);
}
