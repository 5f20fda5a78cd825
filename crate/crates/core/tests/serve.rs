use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use http_body_util::BodyExt;
use pathprobe::atlas::{build_atlas, UmapParams};
use pathprobe::cohort::FineLabel;
use pathprobe::encoder::{attach_head, build_condition, toy_encoder, toy_spec, Classifier, Condition, Family, NUM_CLASSES};
use pathprobe::evaluator::collapse_coarse;
use pathprobe::serve::{
    router, write_model_registry, AnalyzeResponse, AppState, AtlasListing, ModelInfo, ModelStatus,
};
use pathprobe::synthetic::{synthetic_cohort, SyntheticStore};
use pathprobe::trainer::train_fold;
use serde_json::json;
use tower::ServiceExt;

fn classifier(seed: u64) -> Classifier {
    Classifier::new(
        Box::new(toy_encoder(8, seed).unwrap()),
        attach_head(8, NUM_CLASSES, seed).unwrap(),
    )
    .unwrap()
}

fn png_b64(size: u32) -> String {
    let tile = SyntheticStore::new(size, 4).render(FineLabel::A, "c", "t");
    let mut buf = std::io::Cursor::new(Vec::new());
    tile.write_to(&mut buf, image::ImageFormat::Png).unwrap();
    base64::engine::general_purpose::STANDARD.encode(buf.into_inner())
}

fn analyze(body: serde_json::Value) -> Request<Body> {
    Request::post("/analyze")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

async fn send(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn state_with_atlas(dir: &std::path::Path) -> Arc<AppState> {
    let clf = classifier(1);
    let cohort = synthetic_cohort(&[FineLabel::G, FineLabel::M], 3, 4);
    let params = UmapParams { n_neighbors: 5, ..UmapParams::default() };
    let atlas = build_atlas(&clf, &cohort.cases, &SyntheticStore::new(256, 1), 4, Some(dir), params, 2).unwrap();
    let state = Arc::new(AppState::new(Some(atlas), 4 * 1024 * 1024));
    state.insert("toy(LP)", clf, Condition::Lp);
    state
}

#[tokio::test]
async fn analyze_returns_probabilities_saliency_and_projection() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state_with_atlas(dir.path()));
    let (status, body) = send(
        &app,
        analyze(json!({
            "image": png_b64(600), "microns_per_pixel": 0.44, "model_id": "toy(LP)",
            "want_saliency": true, "want_projection": true, "target_class": "G"
        })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: AnalyzeResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!(r.fine_probs.len(), 6);
    assert!((r.fine_probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_eq!(r.coarse_probs, collapse_coarse(&r.fine_probs).to_vec());
    assert_eq!(r.subpatch_probs.len(), 4);
    assert!(r.saliency.is_some());
    let p = r.projection.unwrap();
    assert!(p.iter().all(|v| v.is_finite()));
}

#[tokio::test]
async fn analyze_error_statuses() {
    let state = Arc::new(AppState::new(None, 512 * 1024));
    state.insert("ready", classifier(2), Condition::Lp);
    state.insert_loading("warming", Condition::Ft, Family::VitClass, 8);
    let app = router(state);
    let small = png_b64(200);
    let cases = [
        (json!({"image": small, "microns_per_pixel": 0.44, "model_id": "missing"}), StatusCode::NOT_FOUND),
        (json!({"image": small, "microns_per_pixel": 0.44, "model_id": "warming"}), StatusCode::SERVICE_UNAVAILABLE),
        (json!({"image": "%%%", "microns_per_pixel": 0.44, "model_id": "ready"}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"image": small, "microns_per_pixel": 0.0, "model_id": "ready"}), StatusCode::UNPROCESSABLE_ENTITY),
        (
            json!({"image": small, "microns_per_pixel": 0.44, "model_id": "ready", "want_projection": true}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (
            json!({"image": small, "microns_per_pixel": 0.44, "model_id": "ready",
                   "roi": {"x": 150, "y": 150, "width": 100, "height": 100}}),
            StatusCode::UNPROCESSABLE_ENTITY,
        ),
        (json!({"image": png_b64(900), "microns_per_pixel": 0.44, "model_id": "ready"}), StatusCode::PAYLOAD_TOO_LARGE),
    ];
    for (body, expected) in cases {
        let (status, text) = send(&app, analyze(body)).await;
        assert_eq!(status, expected, "{}", String::from_utf8_lossy(&text));
        if status != StatusCode::PAYLOAD_TOO_LARGE {
            let v: serde_json::Value = serde_json::from_slice(&text).unwrap();
            assert!(v["error"].is_string());
        }
    }
}

#[tokio::test]
async fn listing_routes() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state_with_atlas(dir.path()));

    let (status, body) = send(&app, Request::get("/healthz").body(Body::empty()).unwrap()).await;
    assert_eq!((status, body.as_slice()), (StatusCode::OK, b"ok".as_slice()));

    let (_, body) = send(&app, Request::get("/models").body(Body::empty()).unwrap()).await;
    let models: Vec<ModelInfo> = serde_json::from_slice(&body).unwrap();
    assert_eq!(models.len(), 1);
    assert_eq!(models[0].status, ModelStatus::Ready);

    let (_, body) = send(&app, Request::get("/atlas").body(Body::empty()).unwrap()).await;
    let listing: AtlasListing = serde_json::from_slice(&body).unwrap();
    assert_eq!(listing.points.len(), 24);
    let id = &listing.points[0].id;

    let (status, body) = send(&app, Request::get(format!("/atlas/thumb/{id}")).body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(image::load_from_memory(&body).unwrap().width(), 96);
    let (status, _) = send(&app, Request::get("/atlas/thumb/nope").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn atlas_absent_is_404() {
    let app = router(Arc::new(AppState::new(None, 1024)));
    let (status, _) = send(&app, Request::get("/atlas").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[test]
fn registry_models_load_in_background() {
    let dir = tempfile::tempdir().unwrap();
    let m = synthetic_cohort(&[FineLabel::G, FineLabel::M], 2, 3);
    let train = [m.cases[0].clone(), m.cases[2].clone()];
    let val = [m.cases[1].clone(), m.cases[3].clone()];
    let spec = toy_spec("toy", Family::CnnClass, 6, 1);
    let mut cfg = build_condition(&spec, Condition::Lp).unwrap().with_augment(false).with_patch_limit(3);
    cfg.max_epochs = 1;
    let store = SyntheticStore::new(96, 1);
    let out = train_fold(&cfg, &train, &val, &store, None).unwrap();
    let ckpt = dir.path().join("ok.json");
    out.checkpoint.save(&ckpt).unwrap();
    let mut reg = std::collections::BTreeMap::new();
    reg.insert("good".to_string(), ckpt);
    reg.insert("bad".to_string(), dir.path().join("missing.json"));
    let reg_path = dir.path().join("models.toml");
    write_model_registry(&reg, &reg_path).unwrap();

    let state = Arc::new(AppState::new(None, 1024));
    let handle = state.load_registry_in_background(pathprobe::serve::read_model_registry(&reg_path).unwrap());
    handle.join().unwrap();
    let infos = state.model_infos();
    let status = |id: &str| infos.iter().find(|i| i.model_id == id).unwrap().status;
    assert_eq!(status("good"), ModelStatus::Ready);
    assert_eq!(status("bad"), ModelStatus::Failed);
}
