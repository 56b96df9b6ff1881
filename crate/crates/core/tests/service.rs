use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use chrono::Utc;
use lora_eraser::adapter::LoraAdapter;
use lora_eraser::container::read_container;
use lora_eraser::diagnostics::EditReport;
use lora_eraser::edit::EditConfig;
use lora_eraser::service::{spawn, EditJob, JobState, RunningService, ServiceConfig, Spool};
use lora_eraser::synthetic::{build, FixturePaths, SyntheticConfig};
use reqwest::blocking::multipart::{Form, Part};
use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde_json::{json, Value};
use tempfile::TempDir;

struct Harness {
    _dir: TempDir,
    paths: FixturePaths,
    spool: std::path::PathBuf,
    service: RunningService,
    http: Client,
}

fn config(dir: &Path, paths: &FixturePaths) -> ServiceConfig {
    ServiceConfig {
        bind: "127.0.0.1:0".parse().unwrap(),
        spool_dir: dir.join("spool"),
        bases: BTreeMap::from([("sd-test".to_string(), paths.base.clone())]),
        ..ServiceConfig::default()
    }
}

fn harness(tweak: impl FnOnce(&mut ServiceConfig)) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let fx = build(&SyntheticConfig { layers: 4, ..SyntheticConfig::default() });
    let paths = fx.write_to(dir.path()).unwrap();
    let mut cfg = config(dir.path(), &paths);
    tweak(&mut cfg);
    let spool = cfg.spool_dir.clone();
    Harness {
        service: spawn(cfg).unwrap(),
        _dir: dir,
        paths,
        spool,
        http: Client::new(),
    }
}

impl Harness {
    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.service.url())
    }

    fn submit(&self, config: Value) -> Response {
        self.submit_parts(config, true)
    }

    fn submit_parts(&self, config: Value, with_probes: bool) -> Response {
        let file = |p: &Path| Part::bytes(std::fs::read(p).unwrap()).file_name("x.safetensors");
        let mut form = Form::new()
            .part("adapter", file(&self.paths.adapter))
            .part("concept", file(&self.paths.concept))
            .text("config", config.to_string());
        if with_probes {
            form = form.part("probes", file(&self.paths.probes));
        }
        self.http.post(self.url("/v1/edits")).multipart(form).send().unwrap()
    }

    fn get(&self, path: &str) -> Response {
        self.http.get(self.url(path)).send().unwrap()
    }

    fn wait(&self, id: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(120);
        loop {
            let job: Value = self.get(&format!("/v1/edits/{id}")).json().unwrap();
            if job["state"] == "succeeded" || job["state"] == "failed" {
                return job;
            }
            assert!(Instant::now() < deadline, "job {id} stuck in {}", job["state"]);
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

fn is_job_id(id: &str) -> bool {
    id.len() == 36 && id.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

#[test]
fn submit_poll_download() {
    let h = harness(|_| {});
    let resp = h.submit(json!({"base": "sd-test", "steps": 10}));
    assert_eq!(resp.status(), StatusCode::ACCEPTED);
    let body: Value = resp.json().unwrap();
    let id = body["job_id"].as_str().unwrap().to_string();
    assert!(is_job_id(&id), "{id}");
    assert!(matches!(body["state"].as_str(), Some("queued")));

    let first: Value = h.get(&format!("/v1/edits/{id}")).json().unwrap();
    assert!(["queued", "running", "succeeded"].contains(&first["state"].as_str().unwrap()));

    let job = h.wait(&id);
    assert_eq!(job["state"], "succeeded", "{job}");
    let artifacts = job["artifacts"].as_object().unwrap();
    assert_eq!(artifacts.len(), 2);
    assert!(job["completed_at"].is_string());

    let adapter = h.get(artifacts["adapter"]["url"].as_str().unwrap());
    assert_eq!(adapter.status(), StatusCode::OK);
    let etag = adapter.headers()["etag"].to_str().unwrap().to_string();
    assert_eq!(etag, format!("\"{}\"", artifacts["adapter"]["sha256"].as_str().unwrap()));
    let bytes = adapter.bytes().unwrap();
    assert_eq!(bytes.len() as u64, artifacts["adapter"]["bytes"].as_u64().unwrap());
    let edited = LoraAdapter::from_tensor_map(&read_container(&bytes).unwrap()).unwrap();
    assert_eq!(edited.layers.len(), 4);

    let report = h.get(&format!("/v1/edits/{id}/artifacts/report")).text().unwrap();
    let report = EditReport::from_json(&report).unwrap();
    assert_eq!(report.layers.len(), 4);
    assert!(report.benign_drift.is_some());

    let cached = h
        .http
        .get(h.url(&format!("/v1/edits/{id}/artifacts/adapter")))
        .header("if-none-match", &etag)
        .send()
        .unwrap();
    assert_eq!(cached.status(), StatusCode::NOT_MODIFIED);

    let bases: Value = h.get("/v1/bases").json().unwrap();
    assert_eq!(bases["bases"], json!(["sd-test"]));
    let health: Value = h.get("/healthz").json().unwrap();
    assert_eq!(health["status"], "ok");
}

#[test]
fn service_output_matches_the_library() {
    let h = harness(|_| {});
    let id = h.submit_parts(json!({"base": "sd-test", "patterns": ["*to_k*"], "eta": 0.2}), false).json::<Value>().unwrap()
        ["job_id"]
        .as_str()
        .unwrap()
        .to_string();
    assert_eq!(h.wait(&id)["state"], "succeeded");
    let served = h.get(&format!("/v1/edits/{id}/artifacts/adapter")).bytes().unwrap();

    let fx = build(&SyntheticConfig { layers: 4, ..SyntheticConfig::default() });
    let base = lora_eraser::adapter::BaseWeights::load(&h.paths.base).unwrap();
    let adapter = LoraAdapter::load(&h.paths.adapter).unwrap();
    let config = EditConfig { eta: 0.2, ..EditConfig::default() };
    let local = lora_eraser::edit::edit_adapter(&adapter, &base, &fx.concept, &config, &["*to_k*"], None).unwrap();
    let local_bytes = lora_eraser::container::write_container(&local.adapter.to_tensor_map().unwrap()).unwrap();
    assert_eq!(served.as_ref(), local_bytes.as_slice());
}

fn error(resp: Response) -> (StatusCode, Value) {
    let status = resp.status();
    (status, resp.json().unwrap())
}

#[test]
fn request_errors() {
    let h = harness(|_| {});
    let (status, body) = error(h.submit(json!({"base": "no-such-base"})));
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["code"], "UnknownBase");
    assert_eq!(body["field"], "base");

    let (status, body) = error(h.submit(json!({"base": "sd-test", "steps": 0})));
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "steps");
    assert!(body["message"].is_string());

    let (status, body) = error(h.submit(json!({"base": "sd-test", "stepz": 3})));
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "config");

    let (status, body) = error(h.submit(json!({"base": "sd-test", "patterns": ["nothing"]})));
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "NoLayersMatched");

    let garbage = Form::new()
        .part("adapter", Part::bytes(vec![1, 2, 3]))
        .part("concept", Part::bytes(std::fs::read(&h.paths.concept).unwrap()))
        .text("config", json!({"base": "sd-test"}).to_string());
    let (status, body) = error(h.http.post(h.url("/v1/edits")).multipart(garbage).send().unwrap());
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["code"], "MalformedHeader");
    assert_eq!(body["field"], "adapter");

    let missing = Form::new().text("config", json!({"base": "sd-test"}).to_string());
    let (status, body) = error(h.http.post(h.url("/v1/edits")).multipart(missing).send().unwrap());
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "adapter");

    let (status, _) = error(h.get("/v1/edits/00000000-0000-4000-8000-000000000000"));
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = error(h.get("/v1/edits/00000000-0000-4000-8000-000000000000/artifacts/adapter"));
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(h.service.service.jobs().is_empty());
}

#[test]
fn oversized_upload_is_refused() {
    let h = harness(|c| c.max_upload_bytes = 4096);
    let (status, body) = error(h.submit(json!({"base": "sd-test"})));
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(body["code"], "PayloadTooLarge");
}

#[test]
fn full_queue_and_early_download() {
    let h = harness(|c| c.queue_depth = 1);
    let slow = json!({"base": "sd-test", "steps": 400});
    let mut statuses = Vec::new();
    let mut ids = Vec::new();
    for _ in 0..4 {
        let resp = h.submit(slow.clone());
        statuses.push(resp.status());
        if resp.status() == StatusCode::ACCEPTED {
            ids.push(resp.json::<Value>().unwrap()["job_id"].as_str().unwrap().to_string());
        } else {
            let body: Value = resp.json().unwrap();
            assert_eq!(body["code"], "QueueFull");
        }
    }
    assert!(statuses.contains(&StatusCode::SERVICE_UNAVAILABLE), "{statuses:?}");
    assert!(ids.len() <= 2);

    let (status, body) = error(h.get(&format!("/v1/edits/{}/artifacts/report", ids.last().unwrap())));
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["code"], "NotReady");
    let (status, _) = error(h.get(&format!("/v1/edits/{}/artifacts/manifest", ids[0])));
    assert_eq!(status, StatusCode::NOT_FOUND);

    for id in &ids {
        assert_eq!(h.wait(id)["state"], "succeeded");
    }
}

#[test]
fn failed_jobs_record_the_reason() {
    let h = harness(|_| {});
    // an enormous rate overflows f32 on the first step
    let id = h.submit(json!({"base": "sd-test", "learning_rate": 1e300, "compute_dtype": "f32"})).json::<Value>().unwrap()
        ["job_id"]
        .as_str()
        .unwrap()
        .to_string();
    let job = h.wait(&id);
    assert_eq!(job["state"], "failed", "{job}");
    assert!(job["failure"]["code"].is_string());
    assert!(job.get("artifacts").is_none_or(Value::is_null));
    let (status, _) = error(h.get(&format!("/v1/edits/{id}/artifacts/adapter")));
    assert_eq!(status, StatusCode::CONFLICT);
}

#[test]
fn interrupted_jobs_are_requeued_on_start() {
    let dir = tempfile::tempdir().unwrap();
    let fx = build(&SyntheticConfig { layers: 2, ..SyntheticConfig::default() });
    let paths = fx.write_to(dir.path()).unwrap();
    let cfg = config(dir.path(), &paths);

    let spool = Spool::open(&cfg.spool_dir).unwrap();
    let id = "11111111-2222-4333-8444-555555555555";
    spool
        .write_inputs(id, &std::fs::read(&paths.adapter).unwrap(), &std::fs::read(&paths.concept).unwrap(), None)
        .unwrap();
    spool
        .save_state(&EditJob {
            job_id: id.into(),
            state: JobState::Running,
            submitted_at: Utc::now(),
            started_at: Some(Utc::now()),
            completed_at: None,
            base: "sd-test".into(),
            patterns: vec!["*".into()],
            config: EditConfig::default(),
            failure: None,
            artifacts: None,
        })
        .unwrap();
    // a directory left without a state file is ignored
    std::fs::create_dir_all(cfg.spool_dir.join("half-written")).unwrap();

    let h = Harness {
        spool: cfg.spool_dir.clone(),
        service: spawn(cfg).unwrap(),
        _dir: dir,
        paths,
        http: Client::new(),
    };
    let job = h.wait(id);
    assert_eq!(job["state"], "succeeded", "{job}");
    assert!(h.spool.join(id).join("edited.safetensors").exists());
    assert!(h.spool.join(id).join("report.json").exists());
}

#[test]
fn finished_jobs_survive_restart_and_expire() {
    let dir = tempfile::tempdir().unwrap();
    let fx = build(&SyntheticConfig { layers: 2, ..SyntheticConfig::default() });
    let paths = fx.write_to(dir.path()).unwrap();
    let cfg = config(dir.path(), &paths);

    let first = spawn(cfg.clone()).unwrap();
    let h = Harness { spool: cfg.spool_dir.clone(), service: first, _dir: tempfile::tempdir().unwrap(), paths: paths.clone(), http: Client::new() };
    let id = h.submit(json!({"base": "sd-test"})).json::<Value>().unwrap()["job_id"].as_str().unwrap().to_string();
    let done = h.wait(&id);
    let Harness { service, .. } = h;
    service.stop().unwrap();

    let second = spawn(cfg.clone()).unwrap();
    let job = second.service.job(&id).expect("job reloaded from the spool");
    assert_eq!(job.state, JobState::Succeeded);
    assert_eq!(serde_json::to_value(&*job).unwrap()["artifacts"], done["artifacts"]);

    assert!(second.service.reap_expired(Utc::now()).is_empty());
    let later = Utc::now() + chrono::Duration::hours(25);
    assert_eq!(second.service.reap_expired(later), vec![id.clone()]);
    assert!(second.service.job(&id).is_none());
    assert!(!cfg.spool_dir.join(&id).exists());
    drop(dir);
}

#[test]
fn bad_service_configs() {
    let dir = tempfile::tempdir().unwrap();
    let paths = build(&SyntheticConfig { layers: 1, ..SyntheticConfig::default() }).write_to(dir.path()).unwrap();
    let mut cfg = config(dir.path(), &paths);
    cfg.workers = 0;
    assert!(spawn(cfg.clone()).is_err());
    cfg.workers = 1;
    cfg.bases.insert("broken".into(), dir.path().join("missing.safetensors"));
    assert!(spawn(cfg).is_err());
}
