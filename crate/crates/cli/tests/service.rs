use std::path::{Path, PathBuf};

use axum::body::{to_bytes, Body};
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use keypose_cli::service::{router, ApiError, AppState, ErrorCode, FrameEntry, KeypointsPayload, SkeletonEntry};
use keypose_core::analysis::OutlierQueue;
use keypose_core::dataset::ingest_frames;
use keypose_core::network::{self, NetworkConfig};
use keypose_core::{synthetic, DatasetManifest, MapSpec, Skeleton};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use tower::ServiceExt as _;

fn dataset(dir: &Path, n: u64) -> PathBuf {
    let src = dir.join("src");
    std::fs::create_dir_all(&src).unwrap();
    for i in 0..n {
        synthetic::pig_frame(32, i).0.save_png(&src.join(format!("f{i}.png"))).unwrap();
    }
    let root = dir.join("data");
    ingest_frames(&src, "*.png", Skeleton::pig(), &root).unwrap();
    root
}

fn app(root: &Path, checkpoint: Option<&Path>) -> Router {
    router(AppState::open(root, checkpoint).unwrap(), None)
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
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
    (status, to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec())
}

async fn get_json<T: DeserializeOwned>(app: &Router, uri: &str) -> T {
    let (status, body) = send(app, Method::GET, uri, None).await;
    assert_eq!(status, StatusCode::OK, "{uri}: {}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

fn error_of(body: &[u8]) -> ApiError {
    serde_json::from_slice(body).unwrap()
}

fn nine_rows() -> Value {
    let names = ["snout", "head", "neck", "forelegL1", "forelegR1", "hindlegL1", "hindlegR1", "tailbase", "tailtip"];
    let rows: Vec<Value> = names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            if *n == "tailtip" {
                json!({ "name": n, "x": null, "y": null, "score": null })
            } else {
                json!({ "name": n, "x": 3.0 + i as f64 * 2.125, "y": 20.5 - i as f64 * 0.1, "score": 1.0 })
            }
        })
        .collect();
    json!({ "keypoints": rows })
}

#[tokio::test]
async fn skeleton_lists_keypoints_with_parent_and_swap() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dataset(dir.path(), 2), None);
    let sk: Vec<SkeletonEntry> = get_json(&app, "/api/skeleton").await;
    let table: Vec<(&str, Option<&str>, Option<&str>)> = sk
        .iter()
        .map(|e| (e.name.as_str(), e.parent.as_deref(), e.swap.as_deref()))
        .collect();
    assert_eq!(
        table,
        [
            ("snout", None, None),
            ("head", Some("snout"), None),
            ("neck", Some("head"), None),
            ("forelegL1", Some("neck"), Some("forelegR1")),
            ("forelegR1", Some("neck"), Some("forelegL1")),
            ("hindlegL1", Some("tailbase"), Some("hindlegR1")),
            ("hindlegR1", Some("tailbase"), Some("hindlegL1")),
            ("tailbase", None, None),
            ("tailtip", Some("tailbase"), None),
        ]
    );
}

#[tokio::test]
async fn keypoints_round_trip_and_persist() {
    let dir = tempfile::tempdir().unwrap();
    let root = dataset(dir.path(), 6);
    let app = app(&root, None);
    let before: KeypointsPayload = get_json(&app, "/api/frames/5/keypoints").await;
    assert!(!before.annotated);
    assert!(before.keypoints.iter().all(|k| k.x.is_none() && k.score.is_none()));

    let (status, put_body) = send(&app, Method::PUT, "/api/frames/5/keypoints", Some(nine_rows())).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&put_body));
    let (_, get_body) = send(&app, Method::GET, "/api/frames/5/keypoints", None).await;
    assert_eq!(put_body, get_body);
    let got: Value = serde_json::from_slice(&get_body).unwrap();
    assert_eq!(got["keypoints"], nine_rows()["keypoints"]);
    assert_eq!(got["annotated"], true);

    // on disk, so a freshly started service (or the CLI) sees it
    let m = DatasetManifest::load(&root).unwrap();
    assert_eq!(m.pose(5).unwrap().get(1).unwrap().x, 5.125);
    assert!(m.pose(5).unwrap().get(8).is_none());
    let fresh: Value = get_json(&self::app(&root, None), "/api/frames/5/keypoints").await;
    assert_eq!(fresh, got);

    let frames: Vec<FrameEntry> = get_json(&app, "/api/frames").await;
    assert_eq!(frames.len(), 6);
    assert!(frames.iter().all(|f| f.annotated == (f.id == 5) && f.width == 32 && !f.outlier));
}

#[tokio::test]
async fn omitted_score_means_a_human_placed_point() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dataset(dir.path(), 1), None);
    let mut body = nine_rows();
    body["keypoints"][0].as_object_mut().unwrap().remove("score");
    let (status, reply) = send(&app, Method::PUT, "/api/frames/0/keypoints", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let reply: KeypointsPayload = serde_json::from_slice(&reply).unwrap();
    assert_eq!(reply.keypoints[0].score, Some(1.0));
}

#[tokio::test]
async fn bad_uploads_are_rejected_with_codes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(&dataset(dir.path(), 2), None);
    let mut short = nine_rows();
    short["keypoints"].as_array_mut().unwrap().pop();
    let mut renamed = nine_rows();
    renamed["keypoints"][0]["name"] = json!("nose");
    let mut half = nine_rows();
    half["keypoints"][2]["y"] = Value::Null;
    for body in [short, renamed, half] {
        let (status, reply) = send(&app, Method::PUT, "/api/frames/1/keypoints", Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_eq!(error_of(&reply).code, ErrorCode::BadRequest);
    }
    let (status, reply) = send(&app, Method::PUT, "/api/frames/99/keypoints", Some(nine_rows())).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(error_of(&reply).code, ErrorCode::NotFound);
    let (status, _) = send(&app, Method::GET, "/api/frames/99/image", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    // nothing was written
    let frames: Vec<FrameEntry> = get_json(&app, "/api/frames").await;
    assert!(frames.iter().all(|f| !f.annotated));
}

#[tokio::test]
async fn image_is_served_as_png() {
    let dir = tempfile::tempdir().unwrap();
    let root = dataset(dir.path(), 3);
    let app = app(&root, None);
    let resp = app
        .clone()
        .oneshot(Request::get("/api/frames/2/image").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "image/png");
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    assert_eq!(bytes.as_ref(), std::fs::read(root.join("frames/000002.png")).unwrap());
}

#[tokio::test]
async fn outlier_queue_is_empty_until_a_run_then_flags_frames() {
    let dir = tempfile::tempdir().unwrap();
    let root = dataset(dir.path(), 8);
    let app = app(&root, None);
    let empty: Vec<u64> = get_json(&app, "/api/outliers").await;
    assert!(empty.is_empty());
    OutlierQueue {
        flagged: vec![2, 6],
        prominence_multiplier: 3.0,
        min_separation: 5,
        position_weight: 1.0,
    }
    .save(&root)
    .unwrap();
    let queue: Vec<u64> = get_json(&app, "/api/outliers").await;
    assert_eq!(queue, [2, 6]);
    let frames: Vec<FrameEntry> = get_json(&app, "/api/frames").await;
    let flagged: Vec<u64> = frames.iter().filter(|f| f.outlier).map(|f| f.id).collect();
    assert_eq!(flagged, [2, 6]);
}

#[tokio::test]
async fn predict_needs_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dataset(dir.path(), 2);
    let (status, reply) = send(&app(&root, None), Method::POST, "/api/predict/1", None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(error_of(&reply).code, ErrorCode::NoModel);

    let sk = Skeleton::pig();
    let spec = MapSpec::for_skeleton(&sk);
    let cfg = NetworkConfig {
        input_side: 32,
        depth: 1,
        ..NetworkConfig::for_maps(&spec)
    };
    let ckpt = dir.path().join("m.ckpt");
    network::save_params(&network::build(&cfg).unwrap(), &spec, &sk.fingerprint(), &ckpt).unwrap();
    let app = app(&root, Some(&ckpt));
    let (status, reply) = send(&app, Method::POST, "/api/predict/1", None).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&reply));
    let pose: KeypointsPayload = serde_json::from_slice(&reply).unwrap();
    assert_eq!(pose.keypoints.len(), 9);
    assert!(!pose.annotated);
    let (status, _) = send(&app, Method::POST, "/api/predict/7", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    // suggestions are not stored
    let stored: KeypointsPayload = get_json(&app, "/api/frames/1/keypoints").await;
    assert!(!stored.annotated);
}

#[tokio::test]
async fn static_assets_are_served_beside_the_api() {
    let dir = tempfile::tempdir().unwrap();
    let root = dataset(dir.path(), 1);
    let assets = dir.path().join("ui");
    std::fs::create_dir_all(&assets).unwrap();
    std::fs::write(assets.join("index.html"), "<html>annotator</html>").unwrap();
    let app = router(AppState::open(&root, None).unwrap(), Some(&assets));
    let (status, body) = send(&app, Method::GET, "/index.html", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<html>annotator</html>");
    let (status, _) = send(&app, Method::GET, "/api/skeleton", None).await;
    assert_eq!(status, StatusCode::OK);
}
