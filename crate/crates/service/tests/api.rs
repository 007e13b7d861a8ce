use std::path::PathBuf;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use coalfake::pipeline::session::{Session, SessionHandle, SessionOptions};
use coalfake::pipeline::{HumanMode, Pipeline, RunConfig, Status};
use coalfake::Label;
use coalfake_service::{parse_label_body, router, AppState, LabelBody, TOKEN_HEADER};

fn config(seed: u64) -> RunConfig {
    let mut c = RunConfig::synth_benchmark(seed);
    c.corpus.synth.as_mut().unwrap().sizes = vec![300, 300, 60];
    c.sampling.per_round = 40;
    c.model.epochs = 12;
    c.stop.max_rounds = 2;
    c.human.mode = HumanMode::Interactive;
    c.annotator.rho = 0.5;
    c
}

fn session(seed: u64, autostart: bool) -> Session {
    let p = Pipeline::new(config(seed)).unwrap();
    let state = p.init_state();
    Session::spawn(
        p,
        state,
        SessionOptions {
            autostart,
            state_path: None,
            human_timeout: None,
        },
    )
}

fn app(handle: SessionHandle, token: Option<&str>) -> Router {
    router(AppState::new([("r1".to_string(), handle)], token.map(String::from)), &[])
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn golden(name: &str) -> Value {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap()
}

async fn wait_awaiting(app: &Router) -> Value {
    let start = Instant::now();
    loop {
        let (_, s) = call(app, "GET", "/runs/r1/status", None).await;
        if s["status"] == "awaiting_human" {
            return s;
        }
        assert!(start.elapsed() < Duration::from_secs(120), "never reached review");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

fn label_body(label: &str) -> String {
    format!(r#"{{"label":"{label}","annotator":"ann"}}"#)
}

#[tokio::test(flavor = "multi_thread")]
async fn fresh_status_matches_golden() {
    let s = session(1, false);
    let app = app(s.handle(), None);
    let (code, body) = call(&app, "GET", "/runs/r1/status", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(body, golden("fresh_status.json"));
    let (code, body) = call(&app, "GET", "/runs/r1/tasks", None).await;
    assert_eq!((code, body), (StatusCode::OK, Value::Array(vec![])));
    s.handle().shutdown();
    s.join();
}

#[tokio::test(flavor = "multi_thread")]
async fn error_bodies_match_golden() {
    let s = session(1, false);
    let app = app(s.handle(), None);
    let (code, body) = call(&app, "GET", "/runs/nope/status", None).await;
    assert_eq!((code, body), (StatusCode::NOT_FOUND, golden("unknown_run.json")));
    let (code, body) = call(&app, "POST", "/runs/r1/tasks/x/label", Some(&label_body("maybe"))).await;
    assert_eq!((code, body), (StatusCode::UNPROCESSABLE_ENTITY, golden("bad_label.json")));
    let (code, body) = call(&app, "POST", "/runs/r1/tasks/x/label", Some("not json")).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["error"], "bad_body");
    // Nothing is awaiting review in a fresh run.
    let (code, body) = call(&app, "POST", "/runs/r1/tasks/x/label", Some(&label_body("fake"))).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    assert_eq!(body["error"], "unknown_task");
    s.handle().shutdown();
    s.join();
}

#[tokio::test(flavor = "multi_thread")]
async fn draining_the_queue_resumes_the_round() {
    let s = session(2, true);
    let app = app(s.handle(), None);
    let status = wait_awaiting(&app).await;
    let (_, tasks) = call(&app, "GET", "/runs/r1/tasks", None).await;
    let tasks = tasks.as_array().unwrap().clone();
    let n = tasks.len();
    assert!(n > 0);
    assert_eq!(status["queue_size"], n);
    let ranks: Vec<u64> = tasks.iter().map(|t| t["flagged_rank"].as_u64().unwrap()).collect();
    assert!(ranks.windows(2).all(|w| w[0] < w[1]), "tasks out of rank order: {ranks:?}");

    let cost_before = status["cost"]["human_usd"].as_f64().unwrap();
    for (i, t) in tasks.iter().enumerate() {
        let id = t["record_id"].as_str().unwrap();
        let uri = format!("/runs/r1/tasks/{id}/label");
        let (code, body) = call(&app, "POST", &uri, Some(&label_body("real"))).await;
        assert_eq!(code, StatusCode::OK, "{body}");
        assert_eq!(body["applied"], true);
        assert_eq!(body["queue_size"], n - i - 1);
        let expected_status = if i + 1 == n { "training" } else { "awaiting_human" };
        assert_eq!(body["status"], expected_status);
        // Identical resubmission is a no-op.
        if i == 0 {
            let (code, again) = call(&app, "POST", &uri, Some(&label_body("real"))).await;
            assert_eq!(code, StatusCode::OK);
            assert_eq!(again["applied"], false);
        }
    }
    let (_, after) = call(&app, "GET", "/runs/r1/status", None).await;
    assert!(after["cost"]["human_usd"].as_f64().unwrap() > cost_before);
    s.handle().shutdown();
    s.join();
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_conflicting_labels_apply_once() {
    let s = session(3, true);
    let app = app(s.handle(), None);
    wait_awaiting(&app).await;
    let (_, tasks) = call(&app, "GET", "/runs/r1/tasks", None).await;
    let id = tasks[0]["record_id"].as_str().unwrap().to_string();
    let uri = format!("/runs/r1/tasks/{id}/label");
    let (fake, real) = (label_body("fake"), label_body("real"));
    let (a, b) = tokio::join!(
        call(&app, "POST", &uri, Some(&fake)),
        call(&app, "POST", &uri, Some(&real))
    );
    let mut codes = [a.0, b.0];
    codes.sort();
    assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT]);
    let conflict = if a.0 == StatusCode::CONFLICT { a.1 } else { b.1 };
    assert_eq!(conflict["error"], "conflict");
    s.handle().shutdown();
    s.join();
}

#[tokio::test(flavor = "multi_thread")]
async fn token_is_enforced_when_configured() {
    let s = session(1, false);
    let app = app(s.handle(), Some("secret"));
    let (code, body) = call(&app, "GET", "/runs/r1/status", None).await;
    assert_eq!(code, StatusCode::UNAUTHORIZED);
    assert_eq!(body["error"], "unauthorized");
    let req = Request::get("/runs/r1/status")
        .header(TOKEN_HEADER, "secret")
        .body(Body::empty())
        .unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::OK);
    s.handle().shutdown();
    s.join();
}

#[tokio::test(flavor = "multi_thread")]
async fn cors_preflight_is_answered() {
    let s = session(1, false);
    let app = router(
        AppState::new([("r1".to_string(), s.handle())], None),
        &["http://localhost:5173".to_string()],
    );
    let req = Request::builder()
        .method("OPTIONS")
        .uri("/runs/r1/tasks/a/label")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(
        resp.headers().get("access-control-allow-origin").unwrap(),
        "http://localhost:5173"
    );
    s.handle().shutdown();
    s.join();
}

#[test]
fn label_body_grammar() {
    assert_eq!(parse_label_body(br#"{"label":"fake","annotator":"a"}"#).unwrap().label, coalfake::Label::Fake);
    assert_eq!(parse_label_body(br#"{"label":"real"}"#).unwrap().annotator, "anonymous");
    for bad in [&br#"{"label":"maybe"}"#[..], br#"{"label":"FAKE"}"#, br#"{"label":1}"#, b"", b"{}"] {
        assert!(parse_label_body(bad).is_err(), "{}", String::from_utf8_lossy(bad));
    }
}

#[test]
fn fresh_snapshot_status_is_sampling() {
    let s = session(1, false);
    let snap = s.handle().snapshot();
    assert_eq!((snap.round, snap.status), (0, Status::Sampling));
    s.handle().shutdown();
    s.join();
}

#[test]
fn label_body_fuzz_seeds_parse_as_expected() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus/label_body");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        let parsed = parse_label_body(&std::fs::read(&path).unwrap());
        match name.as_str() {
            "fake" => assert_eq!(parsed.unwrap(), LabelBody { label: Label::Fake, annotator: "ana".into() }),
            "anonymous" => assert_eq!(parsed.unwrap().annotator, "anonymous"),
            _ => assert!(parsed.is_err(), "{name} should be rejected"),
        }
        seen += 1;
    }
    assert_eq!(seen, 4);
}
