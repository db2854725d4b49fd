//! HTTP front end of an intervention session.
//!
//! Routes: `GET /api/state`, `POST /api/control`, `POST /api/intervention`,
//! `GET /api/vocab`, and `GET /api/stream` (server-sent events, one `state`
//! event per published snapshot). A built UI bundle is served at `/` when
//! configured.

use std::convert::Infallible;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use motionloop_core::annotate::Vocabulary;
use motionloop_core::interface::{
    ArmFactory, ControlRequest, InterventionRequest, Session, SessionConfig, SessionError, StateSnapshot,
};
use serde::de::DeserializeOwned;
use serde_json::json;
use tower_http::services::ServeDir;

use crate::arms::ArmKit;
use crate::config::Config;
use crate::error::CliError;

#[derive(Clone)]
struct App {
    session: Arc<Session>,
}

struct ApiError(SessionError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "error": self.0.to_string(), "status": status.as_u16() }))).into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError(SessionError::BadRequest(e.to_string())))
}

/// Session worker driving episodes with the configured arm.
pub fn start_session(cfg: &Config, vocab: Arc<Vocabulary>) -> Result<Session, CliError> {
    let spec = cfg.task_spec()?;
    let ctx = Arc::new(motionloop_core::sim::OracleContext::new(
        spec.clone(),
        cfg.sim.clone(),
        cfg.annotation.clone(),
        vocab.clone(),
    ));
    let kit = ArmKit::new(ctx, &cfg.arm, cfg.policy.noise_scale)?;
    let session_cfg = SessionConfig {
        id: "default".into(),
        task: spec.clone(),
        sim: cfg.sim.clone(),
        episode: cfg.episode_for(&spec),
        step_gate: cfg.serve.step_gate,
        period_ms: cfg.serve.period_ms,
        seed: cfg.seed,
        export_path: cfg.serve.export.clone(),
    };
    let factory: ArmFactory = Box::new(move |seed| kit.build(seed));
    Ok(Session::spawn(session_cfg, vocab, factory))
}

pub fn router(session: Arc<Session>, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/state", get(state))
        .route("/api/control", post(control))
        .route("/api/intervention", post(intervention))
        .route("/api/vocab", get(vocab))
        .route("/api/stream", get(stream))
        .with_state(App { session });
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

async fn state(State(app): State<App>) -> Json<StateSnapshot> {
    Json(app.session.state().as_ref().clone())
}

async fn vocab(State(app): State<App>) -> Json<Vocabulary> {
    Json(app.session.vocab().as_ref().clone())
}

async fn control(State(app): State<App>, body: Bytes) -> Result<Response, ApiError> {
    let req: ControlRequest = parse(&body)?;
    let session = app.session.clone();
    tokio::task::spawn_blocking(move || session.control(req.command))
        .await
        .map_err(|_| ApiError(SessionError::Closed))?
        .map_err(ApiError)?;
    Ok(Json(json!({ "ok": true, "command": req.command })).into_response())
}

async fn intervention(State(app): State<App>, body: Bytes) -> Result<Response, ApiError> {
    let req: InterventionRequest = parse(&body)?;
    let session = app.session.clone();
    let event = tokio::task::spawn_blocking(move || session.intervene(req))
        .await
        .map_err(|_| ApiError(SessionError::Closed))?
        .map_err(ApiError)?;
    Ok(Json(event).into_response())
}

fn event(snap: &StateSnapshot) -> Event {
    Event::default()
        .event("state")
        .id(snap.revision.to_string())
        .data(serde_json::to_string(snap).expect("snapshots serialize"))
}

/// Current snapshot first, then every newer one.
async fn stream(State(app): State<App>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = app.session.subscribe();
    let first = app.session.state();
    let (tx, out) = tokio::sync::mpsc::channel::<Arc<StateSnapshot>>(64);
    std::thread::spawn(move || {
        let seen = first.revision;
        if tx.blocking_send(first).is_err() {
            return;
        }
        while let Ok(snap) = rx.recv() {
            if snap.revision > seen && tx.blocking_send(snap).is_err() {
                break;
            }
        }
    });
    let events = futures::stream::unfold(out, |mut rx| async move { rx.recv().await.map(|s| (Ok(event(&s)), rx)) });
    Sse::new(events).keep_alive(KeepAlive::default())
}

pub fn serve(cfg: &Config, vocab: Arc<Vocabulary>) -> Result<(), CliError> {
    let session = Arc::new(start_session(cfg, vocab)?);
    let addr = cfg.serve.addr.clone();
    let ui_dir = cfg.serve.ui_dir.clone();
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(CliError::runtime)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(CliError::runtime)?;
        println!("serving on http://{local}");
        axum::serve(listener, router(session, ui_dir))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(CliError::runtime)
    })
}
