use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use image::{DynamicImage, GrayImage};
use serde_json::{json, Value};
use tower::ServiceExt;

use tipqc_core::curator::replay;
use tipqc_core::fixtures::{render, sample_specs, Style};
use tipqc_core::pipeline::{Engine, PipelineConfig};
use tipqc_core::raster::encode_png;
use tipqc_core::scorer::{Scorer, ScorerError};
use tipqc_service::{app, AppState, Clock};

/// Posterior set from the test.
struct Dial(AtomicU64);

impl Dial {
    fn set(&self, f: f64) {
        self.0.store(f.to_bits(), Ordering::SeqCst);
    }
}

impl Scorer for Dial {
    fn posterior(&self, _: &GrayImage) -> Result<f64, ScorerError> {
        Ok(f64::from_bits(self.0.load(Ordering::SeqCst)))
    }
    fn id(&self) -> String {
        "dial".into()
    }
}

struct Harness {
    _dir: tempfile::TempDir,
    manifest: std::path::PathBuf,
    state: Arc<AppState>,
    app: Router,
    dial: Arc<Dial>,
    token: Option<String>,
}

fn harness(token: Option<&str>) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("manifest.jsonl");
    let config = PipelineConfig {
        data_dir: dir.path().join("data"),
        manifest: manifest.clone(),
        token: token.map(str::to_owned),
        ..PipelineConfig::default()
    };
    let ticks = Arc::new(AtomicU64::new(1_000));
    let clock: Clock = Arc::new(move || ticks.fetch_add(1, Ordering::SeqCst));
    let engine = Engine::open(config, 0).unwrap();
    let dial = Arc::new(Dial(AtomicU64::new(0.01f64.to_bits())));
    let state = AppState::new(engine, dial.clone(), clock);
    Harness { app: app(state.clone()), _dir: dir, manifest, state, dial, token: token.map(str::to_owned) }
}

fn clean_png() -> Vec<u8> {
    let spec = &sample_specs(1, 0.0, Style::RealStyle, 21).unwrap()[0];
    encode_png(&DynamicImage::ImageRgb8(render(spec).unwrap().image)).unwrap()
}

impl Harness {
    async fn call(&self, method: &str, uri: &str, body: Body, auth: bool) -> (StatusCode, Vec<u8>) {
        let mut req = Request::builder().method(method).uri(uri);
        if let (true, Some(t)) = (auth, &self.token) {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        if method == "POST" && !uri.starts_with("/ingest") {
            req = req.header("content-type", "application/json");
        }
        let resp = self.app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
        let status = resp.status();
        (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
    }

    async fn json(&self, method: &str, uri: &str, body: Value) -> (StatusCode, Value) {
        let b = if body.is_null() { Body::empty() } else { Body::from(body.to_string()) };
        let (s, bytes) = self.call(method, uri, b, true).await;
        (s, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    async fn ingest(&self, png: &[u8], f: f64) -> (StatusCode, Value) {
        self.dial.set(f);
        let (s, bytes) = self.call("POST", "/ingest?source=test", Body::from(png.to_vec()), true).await;
        (s, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }

    fn events(&self) -> u64 {
        self.state.engine().manifest().state().events
    }
}

#[tokio::test]
async fn ingest_routes_and_queue_shows_borderline() {
    let h = harness(None);
    let png = clean_png();
    let (s, a) = h.ingest(&png, 0.01).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(a["decision"], "A");
    assert!(a["record_id"].as_str().unwrap().starts_with("r-"));
    assert!(a["q"].as_f64().unwrap() >= 0.5);

    let black = encode_png(&DynamicImage::ImageLuma8(GrayImage::new(600, 1500))).unwrap();
    let (_, d) = h.ingest(&black, 0.99).await;
    assert_eq!((d["decision"].as_str(), d["q"].as_f64()), (Some("D"), Some(0.0)));

    let (_, r) = h.ingest(&png, 0.3).await;
    assert_eq!(r["decision"], "R");
    let (s, q) = h.json("GET", "/queue?state=PENDING", Value::Null).await;
    assert_eq!(s, StatusCode::OK);
    let ids: Vec<&str> = q.as_array().unwrap().iter().map(|i| i["record_id"].as_str().unwrap()).collect();
    assert_eq!(ids, vec![r["record_id"].as_str().unwrap()]);

    let (s, _) = h.call("POST", "/ingest", Body::from("not an image"), true).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = h.json("GET", "/queue?state=bogus", Value::Null).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn claim_label_and_conflicts() {
    let h = harness(None);
    let png = clean_png();
    let (_, r) = h.ingest(&png, 0.3).await;
    let id = r["record_id"].as_str().unwrap().to_string();

    let before = h.events();
    let (s, _) = h.json("POST", &format!("/queue/{id}/label"), json!({"reviewer_id": "ann", "label": 1})).await;
    assert_eq!(s, StatusCode::CONFLICT, "label without claim");
    assert_eq!(h.events(), before, "rejected mutations are not journaled");

    let (s, item) = h.json("POST", &format!("/queue/{id}/claim"), json!({"reviewer_id": "ann"})).await;
    assert_eq!((s, item["state"].as_str()), (StatusCode::OK, Some("CLAIMED")));
    assert_eq!(h.events(), before + 1);
    let (s, _) = h.json("POST", &format!("/queue/{id}/claim"), json!({"reviewer_id": "bob"})).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, res) = h.json("POST", &format!("/queue/{id}/label"), json!({"reviewer_id": "ann", "label": 1})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!((res["human_label"].as_u64(), res["final_label"].as_u64()), (Some(1), Some(1)));
    assert_eq!(h.events(), before + 2);

    let (_, rec) = h.json("GET", &format!("/records/{id}"), Value::Null).await;
    assert_eq!((rec["human_label"].as_u64(), rec["final_label"].as_u64()), (Some(1), Some(1)));
    assert_eq!(rec["route"]["decision"], "R");

    let (s, _) = h.json("POST", &format!("/queue/{id}/claim"), json!({"reviewer_id": "ann"})).await;
    assert_eq!(s, StatusCode::CONFLICT, "resolved items cannot be claimed");
    let (s, item) = h.json("POST", &format!("/records/{id}/reopen"), Value::Null).await;
    assert_eq!((s, item["kind"].as_str()), (StatusCode::OK, Some("REOPENED")));
    let (_, rec) = h.json("GET", &format!("/records/{id}"), Value::Null).await;
    assert!(rec["final_label"].is_null());

    let (s, _) = h.json("POST", "/queue/r-999999/claim", json!({"reviewer_id": "ann"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = h.json("GET", "/records/r-999999", Value::Null).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn claim_next_release_and_unqualified() {
    let h = harness(None);
    let png = clean_png();
    for _ in 0..2 {
        h.ingest(&png, 0.4).await;
    }
    let (s, first) = h.json("POST", "/queue/next", json!({"reviewer_id": "ann", "lease_seconds": 60})).await;
    assert_eq!(s, StatusCode::OK);
    let (_, second) = h.json("POST", "/queue/next", json!({"reviewer_id": "bob"})).await;
    assert_ne!(first["record_id"], second["record_id"]);
    let (s, _) = h.json("POST", "/queue/next", json!({"reviewer_id": "cy"})).await;
    assert_eq!(s, StatusCode::NO_CONTENT);

    let id = second["record_id"].as_str().unwrap();
    let (s, it) = h.json("POST", &format!("/queue/{id}/release"), json!({"reviewer_id": "bob"})).await;
    assert_eq!((s, it["state"].as_str()), (StatusCode::OK, Some("PENDING")));

    let id = first["record_id"].as_str().unwrap();
    let (_, res) = h.json("POST", &format!("/queue/{id}/label"), json!({"reviewer_id": "ann", "label": "UNQUALIFIED"})).await;
    assert_eq!((res["status"].as_str(), res["human_label"].as_str()), (Some("DROPPED"), Some("UNQUALIFIED")));
}

#[tokio::test]
async fn images_and_auth() {
    let h = harness(Some("s3cret"));
    let png = clean_png();
    let (s, _) = h.call("POST", "/ingest", Body::from(png.clone()), false).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = h.call("GET", "/healthz", Body::empty(), false).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(h.events(), 1, "unauthorized requests leave no trace");

    let (_, a) = h.ingest(&png, 0.01).await;
    let id = a["record_id"].as_str().unwrap();
    let (s, bytes) = h.call("GET", &format!("/images/{id}"), Body::empty(), true).await;
    assert_eq!(s, StatusCode::OK);
    let img = image::load_from_memory(&bytes).unwrap();
    assert_eq!((img.width(), img.height()), (600, 1500));
    let (s, _) = h.call("GET", "/images/nope", Body::empty(), true).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn stats_conserve_routes_and_replay_exactly() {
    let h = harness(None);
    let png = clean_png();
    let black = encode_png(&DynamicImage::ImageLuma8(GrayImage::new(600, 1500))).unwrap();
    let fs = [0.01, 0.3, 0.99, 0.7, 0.5];
    for i in 0..15 {
        let img = if i % 4 == 3 { &black } else { &png };
        assert_eq!(h.ingest(img, fs[i % fs.len()]).await.0, StatusCode::OK);
    }
    let (_, pending) = h.json("GET", "/queue?state=PENDING", Value::Null).await;
    let id = pending[0]["record_id"].as_str().unwrap().to_string();
    h.json("POST", &format!("/queue/{id}/claim"), json!({"reviewer_id": "ann"})).await;
    h.json("POST", &format!("/queue/{id}/label"), json!({"reviewer_id": "ann", "label": 0})).await;

    let now = h.state.now() + 1_000_000;
    let live = h.state.engine().manifest().state().stats(now);
    let routes = live.routes;
    assert_eq!(routes.a + routes.r + routes.d, 15);
    assert_eq!(live.human_label_events, 1);
    let replayed = replay(&h.manifest).unwrap().stats(now);
    assert_eq!(serde_json::to_string(&replayed).unwrap(), serde_json::to_string(&live).unwrap());

    let (_, s) = h.json("GET", "/stats", Value::Null).await;
    let sum: u64 = ["A", "R", "D"].iter().map(|k| s["routes"][k].as_u64().unwrap()).sum();
    assert_eq!(sum, 15);
}

#[tokio::test]
async fn scorer_swap_is_versioned() {
    let h = harness(None);
    assert_eq!(h.state.scorer().version, 1);
    let v = h.state.swap_scorer(Arc::new(Dial(AtomicU64::new(0.99f64.to_bits()))));
    assert_eq!(v, 2);
    let (_, a) = h.ingest(&clean_png(), 0.01).await;
    // the dial on the harness no longer drives scoring
    assert_eq!(a["f"].as_f64(), Some(0.99));
}
