use std::path::Path;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use mrp_core::simulate::{raw_fixture, SimConfig};
use mrp_server::jobs::{JobKind, JobState, Registry, INTERRUPTED};
use mrp_server::{app as build, ServerConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

const BOUNDARY: &str = "mrp-test-boundary";

fn config(root: &Path, workers: usize, max_upload: usize) -> ServerConfig {
    ServerConfig {
        data_root: root.to_path_buf(),
        workers,
        max_upload,
        static_dir: None,
    }
}

/// The four input files of a small synthetic data set, as multipart parts.
fn inputs(seed: u64) -> Vec<(&'static str, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SimConfig {
        zips: 5,
        counties: 2,
        weeks: 6,
        tested_share: 0.3,
        seed,
        ..SimConfig::default()
    };
    raw_fixture(&cfg).unwrap().write_dir(dir.path()).unwrap();
    let read = |f: &str| std::fs::read(dir.path().join(f)).unwrap();
    vec![
        ("records", read("records.csv")),
        ("acs", read("population.csv")),
        ("crosswalk", read("crosswalk.csv")),
        ("tracts", read("tracts.csv")),
    ]
}

fn multipart(parts: &[(&str, Vec<u8>)]) -> Request<Body> {
    let mut body = Vec::new();
    for (name, data) in parts {
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"{name}\"; filename=\"{name}.csv\"\r\nContent-Type: text/csv\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/datasets")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let (status, bytes) = send(app, req).await;
    let v = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, v)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(app, req).await
}

async fn wait_for(app: &Router, job: &str) -> Value {
    let start = Instant::now();
    loop {
        let (status, v) = get(app, &format!("/jobs/{job}")).await;
        assert_eq!(status, StatusCode::OK);
        if v["state"] == "succeeded" || v["state"] == "failed" {
            return v;
        }
        assert!(start.elapsed() < Duration::from_secs(300), "job {job} stuck: {v}");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

async fn preprocessed_dataset(app: &Router, seed: u64) -> String {
    let (status, ds) = call(app, multipart(&inputs(seed))).await;
    assert_eq!(status, StatusCode::CREATED, "{ds}");
    let id = ds["id"].as_str().unwrap().to_string();
    let (status, job) = post_json(app, &format!("/datasets/{id}/preprocess"), json!({ "seed": 3 })).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let done = wait_for(app, job["job_id"].as_str().unwrap()).await;
    assert_eq!(done["state"], "succeeded", "{done}");
    id
}

fn quick_sampler() -> Value {
    json!({ "chains": 2, "warmup_iters": 100, "sampling_iters": 100 })
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn upload_reports_rejects_and_dedups() {
    let root = tempfile::tempdir().unwrap();
    let (app, _) = build(config(root.path(), 1, 1 << 24)).unwrap();
    let parts = inputs(5);

    let (status, first) = call(&app, multipart(&parts)).await;
    assert_eq!(status, StatusCode::CREATED, "{first}");
    assert_eq!(first["id"], "ds-1");
    let total = first["total_rows"].as_u64().unwrap();
    let rejected = first["rejected"].as_u64().unwrap();
    assert!(rejected > 0, "the fixture carries malformed rows");
    assert_eq!(first["accepted"].as_u64().unwrap() + rejected, total);
    assert_eq!(first["rejects"].as_array().unwrap().len() as u64, rejected.min(100));
    assert!(first.get("duplicate_of").is_none());

    let (status, second) = call(&app, multipart(&parts)).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(second["id"], "ds-2");
    assert_eq!(second["duplicate_of"], "ds-1");
    assert_eq!(second["digest"], first["digest"]);

    let (status, other) = call(&app, multipart(&inputs(6))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert!(other.get("duplicate_of").is_none());

    let (status, fetched) = get(&app, "/datasets/ds-1").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(fetched["dataset"], first);
    assert_eq!(get(&app, "/datasets/ds-9").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn bad_uploads_are_refused() {
    let root = tempfile::tempdir().unwrap();
    let (app, _) = build(config(root.path(), 1, 1 << 24)).unwrap();
    let mut parts = inputs(5);

    let (status, v) = call(&app, multipart(&parts[..3])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("tracts"), "{v}");

    let header = String::from_utf8(parts[0].1.clone()).unwrap();
    let header = header.lines().next().unwrap().to_string();
    let cols = header.split(',').count();
    let junk = vec!["x"; cols].join(",");
    parts[0].1 = format!("{header}\n{junk}\n{junk}\n{junk}\n").into_bytes();
    let (status, v) = call(&app, multipart(&parts)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");
    assert_eq!(v["rejects"]["rejected"], 3);
    assert_eq!(v["rejects"]["total_rows"], 3);
    assert!(!std::fs::read_dir(root.path().join("datasets"))
        .map(|mut d| d.next().is_some())
        .unwrap_or(false));

    let (small, _) = build(config(root.path(), 1, 1024)).unwrap();
    let (status, _) = send(&small, multipart(&inputs(5))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn fit_requests_are_validated() {
    let root = tempfile::tempdir().unwrap();
    let (app, _) = build(config(root.path(), 1, 1 << 24)).unwrap();

    let (status, v) = post_json(&app, "/fits", json!({ "dataset_id": "ds-7", "preset": "A" })).await;
    assert_eq!(status, StatusCode::NOT_FOUND, "{v}");

    let (status, ds) = call(&app, multipart(&inputs(5))).await;
    assert_eq!(status, StatusCode::CREATED);
    let id = ds["id"].as_str().unwrap();
    let (status, v) = post_json(&app, "/fits", json!({ "dataset_id": id, "preset": "A" })).await;
    assert_eq!(status, StatusCode::CONFLICT, "{v}");
    assert_eq!(get(&app, &format!("/datasets/{id}/describe")).await.0, StatusCode::CONFLICT);

    // sensitivity 0.2 with specificity 0.5 cannot separate positives
    let mut spec = serde_json::to_value(mrp_core::model::ModelSpec::preset("A").unwrap()).unwrap();
    spec["outcome"]["sensitivity"] = json!(0.2);
    spec["outcome"]["specificity"] = json!(0.5);
    let (status, v) = post_json(&app, "/fits", json!({ "dataset_id": id, "spec": spec })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    let errors = v["errors"].as_array().unwrap();
    assert!(
        errors
            .iter()
            .any(|e| e["field"] == "spec.outcome" && e["message"].as_str().unwrap().contains("1 - specificity")),
        "{v}"
    );

    let (status, v) = post_json(&app, "/fits", json!({ "dataset_id": id, "preset": "Q" })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["errors"][0]["field"], "preset");

    let (status, v) = post_json(
        &app,
        "/fits",
        json!({ "dataset_id": id, "preset": "A", "sampler": { "chains": 0 } }),
    )
    .await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["errors"][0]["field"], "sampler");

    let (status, v) = post_json(&app, "/fits", json!({ "preset": "A", "colour": 1 })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let fields: Vec<&str> = v["errors"].as_array().unwrap().iter().map(|e| e["field"].as_str().unwrap()).collect();
    assert!(fields.contains(&"colour") && fields.contains(&"dataset_id"), "{fields:?}");

    assert!(!root.path().join("fits").exists() || std::fs::read_dir(root.path().join("fits")).unwrap().count() == 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_fits_and_results() {
    let root = tempfile::tempdir().unwrap();
    let (app, _) = build(config(root.path(), 2, 1 << 24)).unwrap();
    let ds = preprocessed_dataset(&app, 5).await;

    let (status, describe) = get(&app, &format!("/datasets/{ds}/describe")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(describe.is_object());
    let (_, meta) = get(&app, &format!("/datasets/{ds}")).await;
    assert_eq!(meta["preprocess_job"]["state"], "succeeded");
    assert!(meta["preprocess_report"].is_object());

    // unknown predictor on a custom spec needs the dataset's columns
    let mut spec = serde_json::to_value(mrp_core::model::ModelSpec::preset("A").unwrap()).unwrap();
    spec["fixed_effects"] = json!(["male", "no_such_column"]);
    let (status, v) = post_json(&app, "/fits", json!({ "dataset_id": ds, "spec": spec })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert!(v["errors"][0]["message"].as_str().unwrap().contains("no_such_column"));

    let mut fits = Vec::new();
    for preset in ["A", "C"] {
        let (status, v) = post_json(
            &app,
            "/fits",
            json!({ "dataset_id": ds, "preset": preset, "sampler": quick_sampler(), "seed": 9 }),
        )
        .await;
        assert_eq!(status, StatusCode::ACCEPTED, "{v}");
        fits.push((v["fit_id"].as_str().unwrap().to_string(), v["job_id"].as_str().unwrap().to_string()));
    }
    let (status, v) = get(&app, &format!("/fits/{}/summary", fits[1].0)).await;
    assert_eq!(status, StatusCode::CONFLICT, "{v}");

    for (fit, job) in &fits {
        let done = wait_for(&app, job).await;
        assert_eq!(done["state"], "succeeded", "{done}");
        assert_eq!(done["target"], fit.as_str());
        assert!(done.get("progress").is_none());
    }

    let fit = &fits[0].0;
    let (status, summary) = get(&app, &format!("/fits/{fit}/summary")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(summary.to_string().contains("Intercept"));
    for resource in ["loo", "ppc"] {
        let (status, v) = get(&app, &format!("/fits/{fit}/{resource}")).await;
        assert_eq!(status, StatusCode::OK, "{resource}");
        assert!(v.is_object());
    }
    let (status, _) = get(&app, &format!("/fits/{fit}/posterior")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = get(&app, "/fits/fit-99/summary").await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, overall) = get(&app, &format!("/fits/{fit}/estimates")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(overall["grouping"], "overall");
    assert_eq!(overall["rows"].as_array().unwrap().len(), 1);

    let (_, county) = get(&app, &format!("/fits/{fit}/estimates?group=county")).await;
    assert_eq!(county["grouping"], "county:week");
    let rows = county["rows"].as_array().unwrap();
    let week = rows[0]["week"].as_u64().unwrap();
    let (status, filtered) = get(&app, &format!("/fits/{fit}/estimates?group=county&week={week}")).await;
    assert_eq!(status, StatusCode::OK);
    let kept = filtered["rows"].as_array().unwrap();
    assert_eq!(kept.len(), 2, "two counties");
    assert!(kept.iter().all(|r| r["week"] == week));
    assert_eq!(
        kept,
        &rows.iter().filter(|r| r["week"] == week).cloned().collect::<Vec<_>>()
    );

    let (status, by_week) = get(&app, &format!("/fits/{fit}/estimates?group=overall&week={week}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(by_week["rows"].as_array().unwrap().len(), 1);

    let (status, _) = get(&app, &format!("/fits/{fit}/estimates?group=planet")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    // reads have no side effects
    for uri in [
        format!("/fits/{fit}/summary"),
        format!("/fits/{fit}/estimates?group=sex&week={week}"),
        format!("/jobs/{}", fits[0].1),
    ] {
        let a = send(&app, Request::get(&uri).body(Body::empty()).unwrap()).await;
        let b = send(&app, Request::get(&uri).body(Body::empty()).unwrap()).await;
        assert_eq!(a, b, "{uri}");
    }

    let (status, manifest) = get(&app, &format!("/fits/{fit}/manifest")).await;
    assert_eq!(status, StatusCode::OK);
    for stage in ["fit", "diagnose", "poststratify", "report"] {
        assert!(manifest["stages"].get(stage).is_some(), "{stage}");
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn restart_fails_interrupted_jobs() {
    let root = tempfile::tempdir().unwrap();
    {
        let registry = Registry::open(&root.path().join("jobs.jsonl")).unwrap();
        let done = registry.create(JobKind::Preprocess, "ds-1").unwrap();
        registry.transition(&done.id, JobState::Running, None).unwrap();
        registry.transition(&done.id, JobState::Succeeded, None).unwrap();
        let job = registry.create(JobKind::Fit, "fit-1").unwrap();
        registry.transition(&job.id, JobState::Running, None).unwrap();
        registry.create(JobKind::Fit, "fit-2").unwrap();
    }
    let fit_dir = root.path().join("fits/fit-1");
    std::fs::create_dir_all(&fit_dir).unwrap();
    std::fs::write(
        fit_dir.join("meta.json"),
        json!({ "id": "fit-1", "dataset_id": "ds-1", "model": "A" }).to_string(),
    )
    .unwrap();

    let (app, _) = build(config(root.path(), 1, 1 << 24)).unwrap();
    let (_, preprocess) = get(&app, "/jobs/job-1").await;
    assert_eq!(preprocess["state"], "succeeded");
    for job in ["job-2", "job-3"] {
        let (status, v) = get(&app, &format!("/jobs/{job}")).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(v["state"], "failed");
        assert_eq!(v["error"], INTERRUPTED);
    }
    let (status, v) = get(&app, "/fits/fit-1/estimates").await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["state"], "failed");
    assert_eq!(get(&app, "/jobs/job-4").await.0, StatusCode::NOT_FOUND);
    drop(app);

    // a second restart changes nothing further
    let lines = std::fs::read_to_string(root.path().join("jobs.jsonl")).unwrap().lines().count();
    let (app, _) = build(config(root.path(), 1, 1 << 24)).unwrap();
    assert_eq!(get(&app, "/jobs/job-2").await.1["error"], INTERRUPTED);
    assert_eq!(
        std::fs::read_to_string(root.path().join("jobs.jsonl")).unwrap().lines().count(),
        lines
    );
}

#[tokio::test]
async fn openapi_document_is_served() {
    let root = tempfile::tempdir().unwrap();
    let (app, _) = build(config(root.path(), 1, 1 << 24)).unwrap();
    let (status, doc) = get(&app, "/openapi.json").await;
    assert_eq!(status, StatusCode::OK);
    let paths = doc["paths"].as_object().unwrap();
    for p in ["/datasets", "/fits", "/jobs/{id}", "/fits/{id}/estimates"] {
        assert!(paths.contains_key(p), "{p}");
    }
}
