//! HTTP front end of the explanation service.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, SystemTime};

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use iimap::service::{ExplainService, ServiceError, Snapshot};
use log::{info, warn};

fn error_response(e: ServiceError) -> Response {
    let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, Json(e.body())).into_response()
}

async fn health(State(svc): State<Arc<ExplainService>>) -> Response {
    Json(svc.health()).into_response()
}

async fn checkpoints(State(svc): State<Arc<ExplainService>>) -> Response {
    Json(svc.checkpoints()).into_response()
}

async fn explain(State(svc): State<Arc<ExplainService>>, body: Bytes) -> Response {
    let result = tokio::task::spawn_blocking(move || svc.handle_explain_json(&body)).await;
    match result {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => error_response(e),
        Err(e) => error_response(ServiceError::Internal(e.to_string())),
    }
}

pub fn router(svc: Arc<ExplainService>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/checkpoints", get(checkpoints))
        .route("/explain", post(explain))
        .with_state(svc)
}

/// Names and modification times of the checkpoints in `dir`.
fn fingerprint(dir: &Path) -> Vec<(PathBuf, Option<SystemTime>)> {
    iimap::network::checkpoint::list_checkpoints(dir)
        .unwrap_or_default()
        .into_iter()
        .map(|p| {
            let t = std::fs::metadata(&p).and_then(|m| m.modified()).ok();
            (p, t)
        })
        .collect()
}

/// Reloads `dir` whenever its checkpoint listing changes and swaps the new
/// snapshot in. A directory that fails to load keeps the old snapshot.
async fn watch(svc: Arc<ExplainService>, dir: PathBuf, every: Duration) {
    let mut seen = fingerprint(&dir);
    loop {
        tokio::time::sleep(every).await;
        let now = fingerprint(&dir);
        if now == seen {
            continue;
        }
        let load_dir = dir.clone();
        match tokio::task::spawn_blocking(move || Snapshot::load_dir(&load_dir)).await {
            Ok(Ok(snap)) => {
                info!("reloaded {} checkpoints from {}", snap.models.len(), dir.display());
                svc.swap(snap);
                seen = now;
            }
            Ok(Err(e)) => warn!("reload of {} failed, keeping previous models: {e}", dir.display()),
            Err(e) => warn!("reload task failed: {e}"),
        }
    }
}

pub async fn serve(svc: Arc<ExplainService>, addr: SocketAddr, watch_dir: Option<(PathBuf, Duration)>) -> Result<()> {
    if let Some((dir, every)) = watch_dir {
        tokio::spawn(watch(svc.clone(), dir, every));
    }
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    info!("listening on http://{}", listener.local_addr()?);
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
