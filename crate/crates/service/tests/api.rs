use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use lcnerf_core::checkpoint::save_checkpoint;
use lcnerf_core::io;
use lcnerf_core::training::{tiny_config, Trainer};
use lcnerf_service::{router, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Server {
    app: Router,
    _dir: tempfile::TempDir,
}

fn server() -> Server {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = Trainer::new(tiny_config()).unwrap().checkpoint();
    save_checkpoint(&ckpt, &dir.path().join("toy.lcnf")).unwrap();
    Server {
        app: router(ServiceConfig::new(dir.path())),
        _dir: dir,
    }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(v) => req.header("content-type", "application/json").body(Body::from(v.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn new_session(app: &Router, seed: u64) -> String {
    let (s, v) = call_json(app, "POST", "/api/v1/sessions", Some(json!({"checkpoint": "toy", "seed": seed}))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn wait_job(app: &Router, job: &str) -> Value {
    let mut last = 0;
    for _ in 0..2000 {
        let (s, v) = call_json(app, "GET", &format!("/api/v1/jobs/{job}"), None).await;
        assert_eq!(s, StatusCode::OK);
        let it = v["iteration"].as_u64().unwrap();
        assert!(it >= last, "iteration counter went back");
        last = it;
        if v["status"] != "running" {
            return v;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("job {job} did not finish");
}

fn error_code(v: &Value) -> &str {
    assert!(v.get("message").is_some() && v.get("detail").is_some(), "{v}");
    v["code"].as_str().unwrap()
}

#[tokio::test]
async fn sessions_are_created_with_distinct_ids_and_errors_are_structured() {
    let srv = server();
    let a = new_session(&srv.app, 1).await;
    let b = new_session(&srv.app, 1).await;
    assert_ne!(a, b);
    let (s, v) = call_json(&srv.app, "POST", "/api/v1/sessions", Some(json!({"checkpoint": "ghost", "seed": 1}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&v), "unknown_checkpoint");
    assert!(v["message"].as_str().unwrap().contains("ghost"));
    let (s, _) = call_json(&srv.app, "POST", "/api/v1/sessions", Some(json!({"checkpoint": "../toy", "seed": 1}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call_json(&srv.app, "POST", "/api/v1/sessions", Some(json!({"checkpoint": "toy"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    error_code(&v);
    let (s, _) = call(&srv.app, "POST", "/api/v1/sessions", None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let bad = json!({"checkpoint": "toy", "image_png": "%%%", "mask_png": "AAAA"});
    let (s, _) = call_json(&srv.app, "POST", "/api/v1/sessions", Some(bad)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, v) = call_json(&srv.app, "GET", &format!("/api/v1/sessions/{a}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["checkpoint"], "toy");
    assert_eq!(v["regions"], 3);
    let (s, v) = call_json(&srv.app, "GET", "/api/v1/sessions/nope/render", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&v), "unknown_session");
    let (s, _) = call_json(&srv.app, "GET", "/api/v1/jobs/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call_json(&srv.app, "GET", "/elsewhere", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    error_code(&v);
}

#[tokio::test]
async fn renders_are_deterministic_and_queries_are_checked() {
    let srv = server();
    let id = new_session(&srv.app, 3).await;
    let uri = format!("/api/v1/sessions/{id}/render?azimuth=0.2&elevation=0.1&size=12");
    let (s, a) = call(&srv.app, "GET", &uri, None).await;
    assert_eq!(s, StatusCode::OK);
    let (_, b) = call(&srv.app, "GET", &uri, None).await;
    assert_eq!(a, b);
    assert_eq!(io::decode_rgb(&a).unwrap().dim(), (12, 12, 3));
    let (_, c) = call(&srv.app, "GET", &format!("/api/v1/sessions/{id}/render?azimuth=-0.4&size=12"), None).await;
    assert_ne!(a, c);
    let (s, m) = call(&srv.app, "GET", &format!("/api/v1/sessions/{id}/mask"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(io::decode_mask(&m).unwrap().iter().all(|&l| l < 3));
    for q in ["size=257", "size=0", "elevation=2.0", "azimuth=abc"] {
        let (s, v) = call_json(&srv.app, "GET", &format!("/api/v1/sessions/{id}/render?{q}"), None).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{q}");
        error_code(&v);
    }
}

#[tokio::test]
async fn edit_job_lifecycle() {
    let srv = server();
    let id = new_session(&srv.app, 4).await;
    let (_, before) = call(&srv.app, "GET", &format!("/api/v1/sessions/{id}/render"), None).await;
    let (_, mask) = call(&srv.app, "GET", &format!("/api/v1/sessions/{id}/mask"), None).await;
    let labels = io::decode_mask(&mask).unwrap();

    // Unchanged target with budget 1: the editing vector stays zero.
    let body = json!({"mask_png": B64.encode(&mask), "region_ids": [1], "iterations": 1});
    let (s, v) = call_json(&srv.app, "POST", &format!("/api/v1/sessions/{id}/edits"), Some(body)).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let job = v["job_id"].as_str().unwrap().to_string();
    let done = wait_job(&srv.app, &job).await;
    assert_eq!(done["status"], "done");
    assert_eq!(done["iteration"], 1);
    let (_, preview) = call(&srv.app, "GET", &format!("/api/v1/jobs/{job}/preview"), None).await;
    assert_eq!(preview, before);

    // Grow region 1 over the top rows.
    let mut target = labels.clone();
    for j in 0..target.ncols() {
        target[[2, j]] = 1;
        target[[3, j]] = 1;
    }
    let target_png = io::encode_mask(&target).unwrap();
    let body = json!({"mask_png": B64.encode(&target_png), "region_ids": [1], "iterations": 400, "lr": 0.05});
    let (s, v) = call_json(&srv.app, "POST", &format!("/api/v1/sessions/{id}/edits"), Some(body.clone())).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = v["job_id"].as_str().unwrap().to_string();
    let (s, v) = call_json(&srv.app, "POST", &format!("/api/v1/sessions/{id}/edits"), Some(body)).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
    assert_eq!(error_code(&v), "job_active");
    let swap = json!({"region_id": 1, "which": "texture", "donor": {"session_id": id}});
    let (s, _) = call_json(&srv.app, "POST", &format!("/api/v1/sessions/{id}/latents/swap"), Some(swap)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let done = wait_job(&srv.app, &job).await;
    assert_eq!(done["status"], "done", "{done}");
    assert_eq!(done["total"], 400);
    assert!(done["final_loss"].as_f64().unwrap() <= done["initial_loss"].as_f64().unwrap());
    let (_, info) = call_json(&srv.app, "GET", &format!("/api/v1/sessions/{id}"), None).await;
    assert_eq!(info["history_length"], 2);
    assert_eq!(info["active_job"], Value::Null);

    for (body, code) in [
        (json!({"mask_png": "###", "region_ids": [1]}), "malformed_upload"),
        (json!({"mask_png": B64.encode(io::encode_mask(&ndarray::Array2::zeros((3, 3))).unwrap()), "region_ids": [1]}), "bad_mask"),
        (json!({"mask_png": B64.encode(io::encode_mask(&labels.mapv(|_| 7)).unwrap()), "region_ids": [1]}), "label_out_of_range"),
        (json!({"mask_png": B64.encode(&mask), "region_ids": [9]}), "unknown_region"),
        (json!({"mask_png": B64.encode(&mask), "region_ids": [1], "iterations": 0}), "invalid_argument"),
    ] {
        let (s, v) = call_json(&srv.app, "POST", &format!("/api/v1/sessions/{id}/edits"), Some(body)).await;
        assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
        assert_eq!(error_code(&v), code);
    }
}

#[tokio::test]
async fn swaps_follow_the_decoupling_contract() {
    let srv = server();
    let a = new_session(&srv.app, 5).await;
    let b = new_session(&srv.app, 6).await;
    let get = |id: &str, what: &str| format!("/api/v1/sessions/{id}/{what}");
    let (_, mask0) = call(&srv.app, "GET", &get(&a, "mask"), None).await;
    let (_, img0) = call(&srv.app, "GET", &get(&a, "render"), None).await;

    let swap = |region: Value, which: &str, donor: Value| json!({"region_id": region, "which": which, "donor": donor});
    let (s, _) = call_json(&srv.app, "POST", &get(&a, "latents/swap"), Some(swap(json!("all"), "both", json!({"session_id": a})))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(call(&srv.app, "GET", &get(&a, "render"), None).await.1, img0);

    let (s, _) = call_json(&srv.app, "POST", &get(&a, "latents/swap"), Some(swap(json!("all"), "texture", json!({"session_id": b})))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(call(&srv.app, "GET", &get(&a, "mask"), None).await.1, mask0);
    assert_ne!(call(&srv.app, "GET", &get(&a, "render"), None).await.1, img0);

    let (_, bank_b) = call(&srv.app, "GET", &get(&b, "latents"), None).await;
    let file = json!({"file": B64.encode(&bank_b)});
    let (s, v) = call_json(&srv.app, "POST", &get(&a, "latents/swap"), Some(swap(json!([1, 2]), "geometry", file))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["history_length"], 3);

    let (s, v) = call_json(&srv.app, "POST", &get(&a, "latents/swap"), Some(swap(json!(1), "both", json!({"session_id": "s99"})))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(error_code(&v), "unknown_session");
    let (s, _) = call_json(&srv.app, "POST", &get(&a, "latents/swap"), Some(swap(json!(5), "both", json!({"session_id": b})))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = call_json(&srv.app, "POST", &get(&a, "latents/swap"), Some(swap(json!(1), "both", json!({"file": "AAAA"})))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn replaying_a_request_log_reproduces_renders() {
    let mut finals = Vec::new();
    for _ in 0..2 {
        let srv = server();
        let a = new_session(&srv.app, 11).await;
        let b = new_session(&srv.app, 12).await;
        let (_, mask) = call(&srv.app, "GET", &format!("/api/v1/sessions/{b}/mask"), None).await;
        let body = json!({"mask_png": B64.encode(&mask), "region_ids": [1, 2], "iterations": 20});
        let (_, v) = call_json(&srv.app, "POST", &format!("/api/v1/sessions/{a}/edits"), Some(body)).await;
        wait_job(&srv.app, v["job_id"].as_str().unwrap()).await;
        let swap = json!({"region_id": 2, "which": "texture", "donor": {"session_id": b}});
        call_json(&srv.app, "POST", &format!("/api/v1/sessions/{a}/latents/swap"), Some(swap)).await;
        finals.push(call(&srv.app, "GET", &format!("/api/v1/sessions/{a}/render?azimuth=0.3"), None).await.1);
    }
    assert_eq!(finals[0], finals[1]);
}

#[tokio::test]
async fn uploads_start_an_inversion_job_that_yields_a_session() {
    let srv = server();
    let src = new_session(&srv.app, 8).await;
    let (_, img) = call(&srv.app, "GET", &format!("/api/v1/sessions/{src}/render"), None).await;
    let (_, mask) = call(&srv.app, "GET", &format!("/api/v1/sessions/{src}/mask"), None).await;
    let body = json!({
        "checkpoint": "toy",
        "image_png": B64.encode(&img),
        "mask_png": B64.encode(&mask),
        "invert": {"latent_steps": 3, "tune_steps": 2, "mean_samples": 2}
    });
    let (s, v) = call_json(&srv.app, "POST", "/api/v1/sessions", Some(body)).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    let done = wait_job(&srv.app, v["job_id"].as_str().unwrap()).await;
    assert_eq!(done["status"], "done", "{done}");
    assert_eq!(done["iteration"], 5);
    assert_eq!(done["preview_url"], Value::Null);
    let id = done["session_id"].as_str().unwrap();
    let (s, _) = call(&srv.app, "GET", &format!("/api/v1/sessions/{id}/render"), None).await;
    assert_eq!(s, StatusCode::OK);
}
