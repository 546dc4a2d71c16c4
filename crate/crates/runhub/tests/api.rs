use std::path::Path;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use runhub::config::{SynthRun, TrainGanRun, TrainProbeRun, CONFIG_VERSION};
use runhub::imaging::decode_png_base64;
use runhub::pipeline;
use runhub::server::{router, AppState, ServerOptions};
use runhub::workspace::Workspace;
use scrub_core::genmodels::{GanConfig, ProbeConfig};

struct Fixture {
    _dir: tempfile::TempDir,
    ws: Workspace,
    model: String,
    probe: String,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let ws = Workspace::open(dir.path()).unwrap();
    pipeline::synth(
        &ws,
        SynthRun {
            n: 500,
            ..SynthRun::default()
        },
    )
    .unwrap();
    let g = pipeline::train_gan_stage(
        &ws,
        TrainGanRun {
            version: CONFIG_VERSION,
            dataset: None,
            gan: GanConfig {
                epochs: 2,
                warmup_epochs: 8,
                ..GanConfig::default()
            },
        },
    )
    .unwrap();
    let p = pipeline::train_probe_stage(
        &ws,
        TrainProbeRun {
            version: CONFIG_VERSION,
            dataset: None,
            probe: ProbeConfig {
                epochs: 10,
                seed: 11,
                ..ProbeConfig::default()
            },
        },
    )
    .unwrap();
    Fixture {
        model: g.outputs[0].clone(),
        probe: p.outputs[0].clone(),
        ws,
        _dir: dir,
    }
}

fn app(ws: &Workspace, opts: ServerOptions) -> (axum::Router, AppState) {
    let state = AppState::start(ws.clone(), opts);
    (router(state.clone()), state)
}

async fn call(app: &axum::Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, axum::http::HeaderMap, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, headers, value)
}

fn assert_gray32(b64: &str) {
    let (w, h, color, depth, bytes) = decode_png_base64(b64).unwrap();
    assert_eq!((w, h), (32, 32));
    assert_eq!(color, png::ColorType::Grayscale);
    assert_eq!(depth, png::BitDepth::Eight);
    assert_eq!(bytes.len(), 1024);
}

fn unlearn_body(fx: &Fixture) -> Value {
    json!({
        "model_id": fx.model,
        "probe": fx.probe,
        "config": {"feature": "thickness", "epochs": 1, "samples_per_epoch": 50},
        "eval": {"n_samples": 200, "auc_samples": 200, "splits": 2},
        "identify": {"n": 300, "seed": 5},
    })
}

async fn wait_done(app: &axum::Router, run_id: &str) -> Value {
    let start = Instant::now();
    loop {
        let (status, _, body) = call(app, Method::GET, &format!("/api/runs/{run_id}"), None).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        if body["status"] == "completed" || body["status"] == "failed" {
            return body;
        }
        assert!(start.elapsed() < Duration::from_secs(120), "run did not finish: {body}");
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
}

#[tokio::test]
async fn models_are_listed() {
    let fx = fixture();
    let (app, _) = app(&fx.ws, ServerOptions::default());
    let (status, _, body) = call(&app, Method::GET, "/api/models", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = body.as_array().unwrap().iter().map(|m| m["id"].as_str().unwrap()).collect();
    assert_eq!(ids, vec![fx.model.as_str(), fx.probe.as_str()]);
    assert_eq!(body[0]["kind"], "gan");
    assert_eq!(body[1]["kind"], "probe");
}

#[tokio::test]
async fn samples_are_deterministic_png() {
    let fx = fixture();
    let (app, _) = app(&fx.ws, ServerOptions::default());
    let uri = format!("/api/models/{}/samples", fx.model);
    let (s1, _, a) = call(&app, Method::POST, &uri, Some(json!({"n": 6, "seed": 9}))).await;
    let (s2, _, b) = call(&app, Method::POST, &uri, Some(json!({"n": 6, "seed": 9}))).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a, b);
    let items = a.as_array().unwrap();
    assert_eq!(items.len(), 6);
    for (i, item) in items.iter().enumerate() {
        assert_eq!(item["latent_id"], format!("s9-{i}"));
        assert_eq!(item["latent"].as_array().unwrap().len(), 32);
        assert_gray32(item["image_png_base64"].as_str().unwrap());
    }
    let (_, _, c) = call(&app, Method::POST, &uri, Some(json!({"n": 6, "seed": 10}))).await;
    assert_ne!(a[0]["image_png_base64"], c[0]["image_png_base64"]);
}

#[tokio::test]
async fn sample_errors() {
    let fx = fixture();
    let (app, _) = app(&fx.ws, ServerOptions::default());
    let (s, _, _) = call(&app, Method::POST, "/api/models/0123456789abcdef/samples", Some(json!({"n": 1, "seed": 0}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let uri = format!("/api/models/{}/samples", fx.model);
    let (s, _, body) = call(&app, Method::POST, &uri, Some(json!({"n": 0, "seed": 0}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    let (s, _, body) = call(&app, Method::POST, &uri, Some(json!({"n": "two", "seed": 0}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["pointer"], "/n");
    let (s, _, body) = call(&app, Method::POST, &uri, Some(json!({"n": 2}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("seed"), "{body}");
    let (s, _, _) = call(&app, Method::POST, &format!("/api/models/{}/samples", fx.probe), Some(json!({"n": 1, "seed": 0}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let req = Request::post(&uri).body(Body::from(r#"{"n":1,"seed":0}"#)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::UNSUPPORTED_MEDIA_TYPE);
}

#[tokio::test]
async fn selections_validate_latent_ids() {
    let fx = fixture();
    let (app, _) = app(&fx.ws, ServerOptions::default());
    let entries: Vec<Value> = (0..20).map(|i| json!({"latent_id": format!("s3-{i}"), "selected": i < 5})).collect();
    let set = json!({"model_id": fx.model, "selections": entries, "annotator": "a1", "feature": "bar"});
    let (s, _, body) = call(&app, Method::POST, "/api/selections", Some(set.clone())).await;
    assert_eq!(s, StatusCode::CREATED, "{body}");
    let id = body["id"].as_str().unwrap();
    let (s, _, stored) = call(&app, Method::GET, &format!("/api/selections/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(stored, set);

    let mut bad = set.clone();
    bad["selections"][3]["latent_id"] = json!("bogus");
    bad["selections"][4]["latent_id"] = json!("s3-0");
    let (s, _, body) = call(&app, Method::POST, "/api/selections", Some(bad)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["latent_ids"], json!(["bogus", "s3-0"]));

    let mut mixed = set.clone();
    mixed["selections"][1]["latent_id"] = json!("s4-1");
    let (s, _, body) = call(&app, Method::POST, "/api/selections", Some(mixed)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["latent_ids"], json!(["s4-1"]));

    let mut unknown_model = set.clone();
    unknown_model["model_id"] = json!("0123456789abcdef");
    let (s, _, _) = call(&app, Method::POST, "/api/selections", Some(unknown_model)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let mut extra = set;
    extra["colour"] = json!("red");
    let (s, _, body) = call(&app, Method::POST, "/api/selections", Some(extra)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("colour"));
    let (s, _, _) = call(&app, Method::GET, "/api/selections/NOPE", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn compare_pairs_share_latents() {
    let fx = fixture();
    let (app, _) = app(&fx.ws, ServerOptions::default());
    let (s, _, body) = call(&app, Method::GET, &format!("/api/models/{0}/compare/{0}?n=5&seed=2", fx.model), None).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    let pairs = body["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 5);
    for (i, p) in pairs.iter().enumerate() {
        assert_eq!(p["latent_id"], format!("s2-{i}"));
        assert_gray32(p["left_png_base64"].as_str().unwrap());
        assert_gray32(p["right_png_base64"].as_str().unwrap());
        // Same model on both sides: the shared latent gives the same image.
        assert_eq!(p["left_png_base64"], p["right_png_base64"]);
    }
    let (s, _, _) = call(&app, Method::GET, &format!("/api/models/{}/compare/0123456789abcdef", fx.model), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _, _) = call(&app, Method::GET, &format!("/api/models/{0}/compare/{0}?n=abc", fx.model), None).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn unlearn_run_end_to_end_survives_restart() {
    let fx = fixture();
    let (app, _) = app(&fx.ws, ServerOptions::default());
    let (s, _, body) = call(&app, Method::POST, "/api/runs/unlearn", Some(unlearn_body(&fx))).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{body}");
    let run_id = body["run_id"].as_str().unwrap().to_string();
    let done = wait_done(&app, &run_id).await;
    assert_eq!(done["status"], "completed", "{done}");
    assert_eq!(done["curves"]["total"].as_array().unwrap().len(), 1);
    assert_eq!(done["epochs_completed"], 1);
    let new_model = done["model_id"].as_str().unwrap().to_string();

    let (s, _, metrics) = call(&app, Method::GET, &format!("/api/runs/{run_id}/metrics"), None).await;
    assert_eq!(s, StatusCode::OK, "{metrics}");
    assert_eq!(metrics["feature"], "thickness");
    assert_eq!(metrics["models"]["generator"], new_model.as_str());
    assert!(metrics["tfr"].is_number());

    let (s, _, pairs) = call(&app, Method::GET, &format!("/api/models/{}/compare/{new_model}?n=3&seed=1", fx.model), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(pairs["pairs"].as_array().unwrap().len(), 3);

    // A fresh service over the same directory answers identically.
    let (again, _) = self::app(&fx.ws, ServerOptions::default());
    let (s, _, restored) = call(&again, Method::GET, &format!("/api/runs/{run_id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(restored["curves"], done["curves"]);
    assert_eq!(restored["status"], "completed");
    let (_, _, m2) = call(&again, Method::GET, &format!("/api/runs/{run_id}/metrics"), None).await;
    assert_eq!(m2, metrics);
    assert!(manifest_exists(fx.ws.root(), &run_id));
}

fn manifest_exists(root: &Path, run_id: &str) -> bool {
    root.join("manifests").join(format!("{run_id}.json")).is_file()
}

#[tokio::test]
async fn unlearn_from_selection() {
    let fx = fixture();
    let (app, _) = app(&fx.ws, ServerOptions::default());
    let entries: Vec<Value> = (0..40).map(|i| json!({"latent_id": format!("s8-{i}"), "selected": i % 4 == 0})).collect();
    let (_, _, sel) = call(
        &app,
        Method::POST,
        "/api/selections",
        Some(json!({"model_id": fx.model, "selections": entries, "feature": "slant"})),
    )
    .await;
    let mut body = unlearn_body(&fx);
    body["selection_id"] = sel["id"].clone();
    body.as_object_mut().unwrap().remove("probe");
    body["config"]["feature"] = json!("slant");
    let (s, _, r) = call(&app, Method::POST, "/api/runs/unlearn", Some(body.clone())).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{r}");
    let done = wait_done(&app, r["run_id"].as_str().unwrap()).await;
    assert_eq!(done["status"], "completed", "{done}");

    body["config"]["feature"] = json!("bar");
    let (s, _, r) = call(&app, Method::POST, "/api/runs/unlearn", Some(body)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{r}");
    assert_eq!(r["pointer"], "/config/feature");
}

#[tokio::test]
async fn failed_runs_are_reported_and_persisted() {
    let fx = fixture();
    let (app, _) = app(&fx.ws, ServerOptions::default());
    // The briefly trained probe sees no bars, so identification is one-sided.
    let mut body = unlearn_body(&fx);
    body["config"]["feature"] = json!("bar");
    let (_, _, r) = call(&app, Method::POST, "/api/runs/unlearn", Some(body)).await;
    let run_id = r["run_id"].as_str().unwrap();
    let done = wait_done(&app, run_id).await;
    assert_eq!(done["status"], "failed");
    assert!(done["error"].as_str().unwrap().contains("negative side"), "{done}");
    let (again, _) = self::app(&fx.ws, ServerOptions::default());
    let (_, _, restored) = call(&again, Method::GET, &format!("/api/runs/{run_id}"), None).await;
    assert_eq!(restored["status"], "failed");
    let (s, _, _) = call(&again, Method::GET, &format!("/api/runs/{run_id}/metrics"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn unlearn_request_validation() {
    let fx = fixture();
    let (app, _) = app(&fx.ws, ServerOptions::default());
    let mut body = unlearn_body(&fx);
    body.as_object_mut().unwrap().remove("probe");
    let (s, _, _) = call(&app, Method::POST, "/api/runs/unlearn", Some(body)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let mut body = unlearn_body(&fx);
    body["config"]["alpha"] = json!(-1.0);
    let (s, _, r) = call(&app, Method::POST, "/api/runs/unlearn", Some(body)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(r["error"].as_str().unwrap().contains("alpha"));

    let mut body = unlearn_body(&fx);
    body["config"]["alpah"] = json!(3);
    let (s, _, r) = call(&app, Method::POST, "/api/runs/unlearn", Some(body)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r["pointer"], "/config/alpah");

    let mut body = unlearn_body(&fx);
    body["model_id"] = json!("0123456789abcdef");
    let (s, _, _) = call(&app, Method::POST, "/api/runs/unlearn", Some(body)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let mut body = unlearn_body(&fx);
    body["selection_id"] = json!("01ARZ3NDEKTSV4RRFFQ69G5FAV");
    let (s, _, _) = call(&app, Method::POST, "/api/runs/unlearn", Some(body)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, _, _) = call(&app, Method::GET, "/api/runs/01ARZ3NDEKTSV4RRFFQ69G5FAV", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn queue_rejects_when_full() {
    let fx = fixture();
    let (app, state) = app(
        &fx.ws,
        ServerOptions {
            start_paused: true,
            ..ServerOptions::default()
        },
    );
    let mut ids = Vec::new();
    for i in 0..9 {
        let (s, _, r) = call(&app, Method::POST, "/api/runs/unlearn", Some(unlearn_body(&fx))).await;
        assert_eq!(s, StatusCode::ACCEPTED, "job {i}: {r}");
        assert_eq!(r["position"], i);
        ids.push(r["run_id"].as_str().unwrap().to_string());
    }
    let (s, headers, r) = call(&app, Method::POST, "/api/runs/unlearn", Some(unlearn_body(&fx))).await;
    assert_eq!(s, StatusCode::CONFLICT, "{r}");
    assert!(headers.contains_key(header::RETRY_AFTER));
    let (_, _, q) = call(&app, Method::GET, &format!("/api/runs/{}", ids[3]), None).await;
    assert_eq!(q["status"], "queued");
    assert_eq!(q["position"], 3);
    assert_eq!(state.queue.len(), 9);

    // Run ids are ULIDs, so submission order is their sort order.
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(sorted, ids);
}

#[tokio::test]
async fn jobs_run_in_submission_order() {
    let fx = fixture();
    let (app, state) = app(
        &fx.ws,
        ServerOptions {
            start_paused: true,
            ..ServerOptions::default()
        },
    );
    let mut ids = Vec::new();
    for _ in 0..2 {
        let (_, _, r) = call(&app, Method::POST, "/api/runs/unlearn", Some(unlearn_body(&fx))).await;
        ids.push(r["run_id"].as_str().unwrap().to_string());
    }
    state.queue.resume();
    let mut finished = Vec::new();
    for id in &ids {
        wait_done(&app, id).await;
        let m: Value = serde_json::from_slice(&std::fs::read(fx.ws.root().join("manifests").join(format!("{id}.json"))).unwrap()).unwrap();
        finished.push((m["started_at"].as_str().unwrap().to_string(), m["finished_at"].as_str().unwrap().to_string()));
    }
    // The second job started after the first finished.
    assert!(finished[1].0 >= finished[0].1, "{finished:?}");
}

#[tokio::test]
async fn reviews_round_trip() {
    let fx = fixture();
    let (app, _) = app(&fx.ws, ServerOptions::default());
    let run_id = std::fs::read_dir(fx.ws.root().join("manifests"))
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path()
        .file_stem()
        .unwrap()
        .to_str()
        .unwrap()
        .to_string();
    let review = json!({
        "run_id": run_id,
        "task": "pinpoint",
        "answers": [{"pair": "s1-0", "choice": "unchanged"}],
        "annotator": "a1",
        "idempotency_key": "k-1",
    });
    let (s, _, r) = call(&app, Method::POST, "/api/reviews", Some(review.clone())).await;
    assert_eq!(s, StatusCode::CREATED, "{r}");
    let id = r["id"].as_str().unwrap().to_string();
    let (s, _, again) = call(&app, Method::POST, "/api/reviews", Some(review.clone())).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(again["id"], id.as_str());
    let (_, _, stored) = call(&app, Method::GET, &format!("/api/reviews/{id}"), None).await;
    assert_eq!(stored["answers"], review["answers"]);
    assert_eq!(stored["task"], "pinpoint");

    let mut bad = review.clone();
    bad["task"] = json!("vibes");
    let (s, _, r) = call(&app, Method::POST, "/api/reviews", Some(bad)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r["pointer"], "/task");
    let mut unknown = review;
    unknown["run_id"] = json!("01ARZ3NDEKTSV4RRFFQ69G5FAV");
    let (s, _, _) = call(&app, Method::POST, "/api/reviews", Some(unknown)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}
