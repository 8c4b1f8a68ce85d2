use std::io::Cursor;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use http_body_util::BodyExt;
use saliencytune::data::{ClassSet, ImageSample};
use saliencytune::explainer::{ExplanationMask, MaskOrigin};
use saliencytune::model::Network;
use saliencytune::synthetic::{generate_synthetic_dataset, input_shape};
use saliencytune::trainer::{train_classifier, TrainingConfig};
use saliencytune_service::{router, AppState, Catalog};
use serde_json::{json, Value};
use tower::ServiceExt;

fn samples() -> Vec<ImageSample> {
    generate_synthetic_dataset(150, 5).unwrap()
}

fn catalog() -> Catalog {
    Catalog::from_dataset(ClassSet::default(), &samples(), 5).unwrap()
}

fn pretrained() -> Network {
    let c = catalog();
    let init = Network::reference(input_shape(), 3, 7).unwrap();
    let cfg = TrainingConfig {
        epochs: 3,
        ..TrainingConfig::default()
    };
    train_classifier(&init, &c.samples, &c.validation, &c.classes, &cfg).unwrap().best
}

fn open(dir: &std::path::Path, net: Network) -> (AppState, Router) {
    let state = AppState::open(dir, catalog(), TrainingConfig::default(), || Ok(net)).unwrap();
    (state.clone(), router(state))
}

async fn call_raw(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, bytes) = call_raw(app, method, uri, body).await;
    (s, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn wait_for(app: &Router, job: &str) -> Value {
    for _ in 0..2400 {
        let (s, j) = call(app, "GET", &format!("/jobs/{job}"), None).await;
        assert_eq!(s, StatusCode::OK);
        if j["status"] == "done" || j["status"] == "failed" {
            return j;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {job} did not finish");
}

fn mask_b64(mask: &ExplanationMask) -> String {
    STANDARD.encode(mask.to_png().unwrap())
}

fn rgb_png(w: u32, h: u32) -> Vec<u8> {
    let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7) as u8, (y * 5) as u8, 90]));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

#[tokio::test]
async fn predict_contract_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = open(dir.path(), pretrained());
    let id = state.catalog().samples[0].id.clone();

    let (s, a) = call(&app, "POST", "/predict", Some(json!({ "sample_id": id }))).await;
    assert_eq!(s, StatusCode::OK);
    assert!(["MEL", "NV", "BKL"].contains(&a["predicted_class"].as_str().unwrap()));
    assert_eq!(a["checkpoint_id"], "ckpt-0001");
    let probs: Vec<f64> = serde_json::from_value(a["probabilities"].clone()).unwrap();
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    for key in ["saliency_png", "mask_png"] {
        let (s, png) = call_raw(&app, "GET", a[key].as_str().unwrap(), None).await;
        assert_eq!(s, StatusCode::OK);
        let img = image::load_from_memory(&png).unwrap().to_luma8();
        assert_eq!(img.dimensions(), (32, 32));
        if key == "mask_png" {
            assert!(img.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
        }
    }

    let (_, b) = call(&app, "POST", "/predict", Some(json!({ "sample_id": id }))).await;
    assert_eq!(a["probabilities"], b["probabilities"]);

    let upload = STANDARD.encode(rgb_png(64, 48));
    let (s, u) = call(&app, "POST", "/predict", Some(json!({ "image": upload }))).await;
    assert_eq!(s, StatusCode::OK);
    assert!(u["sample_id"].is_null());

    let corrupt = STANDARD.encode(b"\x89PNG\r\n\x1a\nnot really");
    assert_eq!(call(&app, "POST", "/predict", Some(json!({ "image": corrupt }))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, "POST", "/predict", Some(json!({ "image": "@@@" }))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, "POST", "/predict", Some(json!({}))).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(
        call(&app, "POST", "/predict", Some(json!({ "sample_id": "nope" }))).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(call_raw(&app, "GET", "/artifacts/..%2Fsaliencytune.db", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn feedback_validation() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = open(dir.path(), Network::reference(input_shape(), 3, 1).unwrap());
    let s0 = state.catalog().samples[0].clone();
    let mask = s0.gt_mask.clone().unwrap();
    let post = |body: Value| {
        let app = app.clone();
        async move { call(&app, "POST", "/feedback", Some(body)).await }
    };

    let (s, v) = post(json!({ "sample_id": s0.id, "corrected_label": "NV" })).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["feedback_id"], 1);
    let (s, v) = post(json!({ "sample_id": s0.id, "corrected_mask": mask_b64(&mask) })).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["feedback_id"], 2);
    assert_eq!(post(json!({ "sample_id": s0.id })).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(
        post(json!({ "sample_id": s0.id, "corrected_label": "SCC" })).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(post(json!({ "sample_id": "missing", "corrected_label": "NV" })).await.0, StatusCode::NOT_FOUND);

    let gray = image::GrayImage::from_fn(32, 32, |x, _| image::Luma([if x < 16 { 0 } else { 128 }]));
    let mut png = Cursor::new(Vec::new());
    gray.write_to(&mut png, image::ImageFormat::Png).unwrap();
    let (s, v) = post(json!({ "sample_id": s0.id, "corrected_mask": STANDARD.encode(png.into_inner()) })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(v["error"].as_str().unwrap().contains("not binary"));

    let small = ExplanationMask::zeros((8, 8), MaskOrigin::Feedback);
    assert_eq!(
        post(json!({ "sample_id": s0.id, "corrected_mask": mask_b64(&small) })).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    // nothing was stored for rejected submissions
    assert_eq!(state.store().pending_feedback().unwrap(), vec![1, 2]);
}

#[tokio::test]
async fn finetune_lifecycle() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = open(dir.path(), pretrained());
    assert_eq!(call(&app, "POST", "/finetune", None).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let s0 = state.catalog().samples[3].clone();
    call(&app, "POST", "/feedback", Some(json!({ "sample_id": s0.id, "corrected_mask": mask_b64(s0.gt_mask.as_ref().unwrap()) }))).await;
    let (s, v) = call(&app, "POST", "/finetune", Some(json!({ "config": { "epochs": 2 } }))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let job = v["job_id"].as_str().unwrap().to_string();
    let done = wait_for(&app, &job).await;
    assert_eq!(done["status"], "done", "{done}");
    assert_eq!(done["feedback_ids"], json!([1]));
    assert!(done["after"]["accuracy"].is_number());
    assert!(done["before"]["accuracy"].is_number());
    assert_eq!(done["config"]["epochs"], 2);

    let out = done["output_checkpoint"].as_str().unwrap();
    let (_, ck) = call(&app, "GET", "/checkpoints", None).await;
    assert_eq!(ck["active"], out);
    assert_eq!(ck["checkpoints"][1]["parent"], "ckpt-0001");
    assert!(dir.path().join("checkpoints").join(format!("{out}.json")).exists());

    let (_, m) = call(&app, "GET", "/metrics/latest", None).await;
    assert_eq!(m["checkpoint_id"], out);
    assert_eq!(m["job_id"], job.as_str());
    assert_eq!(m["holdout"], done["after"]);

    // the record is consumed
    assert_eq!(call(&app, "POST", "/finetune", None).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&app, "GET", "/jobs/job-9999", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(
        call(&app, "POST", "/finetune", Some(json!({ "feedback": [42] }))).await.0,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        call(&app, "POST", "/finetune", Some(json!({ "feedback": [1], "config": { "lambda": 2.0 } }))).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
}

#[tokio::test]
async fn second_job_conflicts_while_running() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = open(dir.path(), Network::reference(input_shape(), 3, 2).unwrap());
    for s in state.catalog().samples.clone().iter().take(40) {
        call(&app, "POST", "/feedback", Some(json!({ "sample_id": s.id, "corrected_label": "MEL" }))).await;
    }
    let (s, v) = call(&app, "POST", "/finetune", Some(json!({ "config": { "epochs": 40 } }))).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let (s, _) = call(&app, "POST", "/finetune", Some(json!({ "feedback": [1] }))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (s, _) = call(&app, "POST", "/rollback", Some(json!({ "checkpoint_id": "ckpt-0001" }))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    // reads keep working on the published checkpoint meanwhile
    let (s, p) = call(&app, "POST", "/predict", Some(json!({ "sample_id": state.catalog().samples[0].id }))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(p["checkpoint_id"], "ckpt-0001");
    let done = wait_for(&app, v["job_id"].as_str().unwrap()).await;
    assert_eq!(done["status"], "done");
    assert_eq!(call(&app, "POST", "/finetune", Some(json!({ "feedback": [1], "config": { "epochs": 1 } }))).await.0, StatusCode::ACCEPTED);
}

#[tokio::test]
async fn explanation_job_keeps_jaccard_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = open(dir.path(), pretrained());
    let pool = state.catalog().samples.clone();
    for s in pool.iter().take(40) {
        let (st, _) = call(
            &app,
            "POST",
            "/feedback",
            Some(json!({ "sample_id": s.id, "corrected_mask": mask_b64(s.gt_mask.as_ref().unwrap()) })),
        )
        .await;
        assert_eq!(st, StatusCode::CREATED);
    }
    let cfg = json!({ "lambda": 1.0, "epochs": 3 });
    let (_, v) = call(&app, "POST", "/finetune", Some(json!({ "feedback": "all-pending", "config": cfg }))).await;
    let first = wait_for(&app, v["job_id"].as_str().unwrap()).await;
    assert_eq!(first["status"], "done", "{first}");
    let before = first["before"]["avg_jaccard"].as_f64().unwrap();
    let after = first["after"]["avg_jaccard"].as_f64().unwrap();
    assert!(after >= before - 0.02, "held-out Jaccard {before} → {after}");

    // same input checkpoint, batch and config
    let (s, _) = call(&app, "POST", "/rollback", Some(json!({ "checkpoint_id": first["input_checkpoint"] }))).await;
    assert_eq!(s, StatusCode::OK);
    let (_, v) = call(&app, "POST", "/finetune", Some(json!({ "feedback": first["feedback_ids"], "config": cfg }))).await;
    let second = wait_for(&app, v["job_id"].as_str().unwrap()).await;
    assert_eq!(second["status"], "done");
    assert_ne!(second["output_checkpoint"], first["output_checkpoint"]);
    for key in ["accuracy", "avg_sensitivity", "avg_jaccard", "jaccard_sd"] {
        let (a, b) = (first["after"][key].as_f64().unwrap(), second["after"][key].as_f64().unwrap());
        assert!((a - b).abs() <= 1e-9, "{key}: {a} vs {b}");
    }
    assert_eq!(
        call(&app, "POST", "/rollback", Some(json!({ "checkpoint_id": "ckpt-0404" }))).await.0,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn pagination_spec_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (state, app) = open(dir.path(), Network::reference(input_shape(), 3, 3).unwrap());
    let total = state.catalog().samples.len();
    let mut seen = Vec::new();
    let mut offset = 0;
    while offset < total {
        let (s, page) = call(&app, "GET", &format!("/samples?offset={offset}&limit=10"), None).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(page["total"], total);
        seen.extend(page["items"].as_array().unwrap().iter().map(|i| i["id"].as_str().unwrap().to_string()));
        offset += 10;
    }
    assert_eq!(seen.len(), total);
    assert_eq!(call(&app, "GET", "/samples?limit=0", None).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let (_, spec) = call(&app, "GET", "/spec", None).await;
    for path in ["/predict", "/feedback", "/finetune", "/jobs/{id}", "/samples", "/checkpoints", "/metrics/latest", "/rollback"] {
        assert!(spec["paths"][path].is_object(), "{path}");
    }

    let id = state.catalog().samples[0].id.clone();
    call(&app, "POST", "/feedback", Some(json!({ "sample_id": id, "corrected_label": "BKL" }))).await;
    let (_, v) = call(&app, "POST", "/finetune", Some(json!({ "config": { "epochs": 1 } }))).await;
    let done = wait_for(&app, v["job_id"].as_str().unwrap()).await;
    drop((state, app));

    // a fresh process picks up the active pointer and the record sequence
    let (_, app) = open(dir.path(), Network::reference(input_shape(), 3, 99).unwrap());
    let (_, ck) = call(&app, "GET", "/checkpoints", None).await;
    assert_eq!(ck["active"], done["output_checkpoint"]);
    let (_, v) = call(&app, "POST", "/feedback", Some(json!({ "sample_id": id, "corrected_label": "NV" }))).await;
    assert_eq!(v["feedback_id"], 2);
}
