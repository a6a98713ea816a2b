use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use iimap::network::checkpoint::{Checkpoint, CheckpointMeta};
use iimap::network::{MaskerConfig, MaskerNet, ModelConfig, PolicyValueNet};
use iimap::service::{ExplainService, Snapshot};
use serde_json::{json, Value};
use tower::ServiceExt;

const START: &str = "rnbqkbnr/pppppppp/8/8/8/8/PPPPPPPP/RNBQKBNR w KQkq - 0 1";

fn app() -> (tempfile::TempDir, axum::Router) {
    let dir = tempfile::tempdir().unwrap();
    for step in [0u64, 10] {
        let net = PolicyValueNet::new(ModelConfig::tiny(), step).unwrap();
        let masker = MaskerNet::new(MaskerConfig::default(), step + 1).unwrap();
        let meta = CheckpointMeta { step, ..Default::default() };
        Checkpoint::from_models(&net, Some(&masker), meta)
            .save(&dir.path().join(format!("ckpt-{step:06}.ckpt")))
            .unwrap();
    }
    let svc = Arc::new(ExplainService::new(Snapshot::load_dir(dir.path()).unwrap()));
    (dir, iimap_cli::server::router(svc))
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, body.to_vec())
}

fn get(path: &str) -> Request<Body> {
    Request::get(path).body(Body::empty()).unwrap()
}

fn post(body: Value) -> Request<Body> {
    Request::post("/explain")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

#[tokio::test]
async fn health_and_checkpoints() {
    let (_dir, app) = app();
    let (status, body) = call(&app, get("/health")).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v, json!({"status": "ok", "checkpoint": "ckpt-000010"}));

    let (status, body) = call(&app, get("/checkpoints")).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let ids: Vec<&str> = v.as_array().unwrap().iter().map(|m| m["checkpoint"].as_str().unwrap()).collect();
    assert_eq!(ids, ["ckpt-000000", "ckpt-000010"]);
}

#[tokio::test]
async fn explain_round_trip() {
    let (_dir, app) = app();
    let (status, a) = call(&app, post(json!({"fen": START}))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, b) = call(&app, post(json!({"fen": START}))).await;
    assert_eq!(a, b);
    let v: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["policy"].as_array().unwrap().len(), 5);
    assert_eq!(v["P"].as_array().unwrap().len(), 8);
    assert_eq!(v["collapsed"][0].as_array().unwrap().len(), 8);
    assert_eq!(v["model"]["checkpoint"], "ckpt-000010");

    let schema: Value = serde_json::from_str(iimap::service::RESPONSE_SCHEMA).unwrap();
    assert!(jsonschema::is_valid(&schema, &v));

    let (status, body) = call(&app, post(json!({"fen": START, "checkpoint": "ckpt-000000", "top_k": 3}))).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["policy"].as_array().unwrap().len(), 3);
    assert_eq!(v["model"]["checkpoint"], "ckpt-000000");
}

#[tokio::test]
async fn explain_errors() {
    let (_dir, app) = app();
    let cases = [
        (json!({"fen": "not a fen"}), StatusCode::BAD_REQUEST, "bad_request"),
        (json!({"fen": START, "checkpoint": "nope"}), StatusCode::NOT_FOUND, "unknown_checkpoint"),
        (
            json!({"fen": "R5k1/5ppp/8/8/8/8/8/6K1 b - - 1 1"}),
            StatusCode::UNPROCESSABLE_ENTITY,
            "terminal_position",
        ),
        (json!({"position": START}), StatusCode::BAD_REQUEST, "bad_request"),
    ];
    let schema: Value = serde_json::from_str(iimap::service::ERROR_SCHEMA).unwrap();
    for (body, status, kind) in cases {
        let (got, bytes) = call(&app, post(body)).await;
        assert_eq!(got, status);
        let v: Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v["error"], kind);
        assert!(jsonschema::is_valid(&schema, &v));
    }
    let (got, _) = call(&app, get("/explain")).await;
    assert_eq!(got, StatusCode::METHOD_NOT_ALLOWED);
}
