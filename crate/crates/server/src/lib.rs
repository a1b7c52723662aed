//! HTTP/JSON front end for `vbsf-core`.
//!
//! One-shot operations (`synth`, `fit`, `impute`, `forecast`,
//! `inject-outliers`, `bench`) are stateless. Stream sessions keep a fitted
//! window on the server and slide it as new columns arrive.

mod error;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::net::TcpListener;
use uuid::Uuid;
use vbsf_core::api::*;
use vbsf_core::data::{self, Injection, SyntheticData, SyntheticSpec};
use vbsf_core::experiment::{self, ExperimentConfig, ExperimentOutput};
use vbsf_core::{engine, FilterState};

pub use error::ApiError;

type ApiResult<T> = Result<Json<T>, ApiError>;

const BODY_LIMIT: usize = 512 * 1024 * 1024;

struct Session {
    state: FilterState,
    columns_seen: usize,
}

impl Session {
    fn info(&self, id: Uuid) -> StreamInfo {
        StreamInfo {
            id: id.to_string(),
            columns_seen: self.columns_seen,
            summary: FitSummary::from(&self.state),
        }
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    streams: Arc<Mutex<HashMap<Uuid, Arc<tokio::sync::Mutex<Session>>>>>,
}

impl AppState {
    fn session(&self, id: &str) -> Result<(Uuid, Arc<tokio::sync::Mutex<Session>>), ApiError> {
        let missing = || ApiError::not_found(format!("no stream with id {id}"));
        let uuid = Uuid::parse_str(id).map_err(|_| missing())?;
        let streams = self.streams.lock().expect("stream table poisoned");
        streams.get(&uuid).cloned().map(|s| (uuid, s)).ok_or_else(missing)
    }
}

pub fn router() -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/v1/synth", post(synth))
        .route("/v1/fit", post(fit))
        .route("/v1/impute", post(impute))
        .route("/v1/forecast", post(forecast))
        .route("/v1/inject-outliers", post(inject))
        .route("/v1/bench", post(bench))
        .route("/v1/streams", post(create_stream))
        .route("/v1/streams/{id}", get(stream_info).delete(delete_stream))
        .route("/v1/streams/{id}/columns", post(push_columns))
        .route("/v1/streams/{id}/forecast", get(stream_forecast))
        .route("/v1/streams/{id}/state", get(stream_state))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(AppState::default())
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router()).await
}

/// Serves until `shutdown` resolves, then drains open connections.
pub async fn serve_with_shutdown<F>(listener: TcpListener, shutdown: F) -> std::io::Result<()>
where
    F: std::future::Future<Output = ()> + Send + 'static,
{
    axum::serve(listener, router())
        .with_graceful_shutdown(shutdown)
        .await
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> vbsf_core::Result<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
        .map_err(ApiError::from)
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn synth(body: Result<Json<SyntheticSpec>, JsonRejection>) -> ApiResult<SyntheticData> {
    let Json(spec) = body?;
    blocking(move || data::generate_synthetic(&spec)).await.map(Json)
}

async fn fit(body: Result<Json<FitRequest>, JsonRejection>) -> ApiResult<FitResponse> {
    let Json(req) = body?;
    blocking(move || {
        let state = engine::fit_window(&req.window, &req.model, req.warm.as_ref())?;
        Ok(FitResponse {
            summary: FitSummary::from(&state),
            state,
        })
    })
    .await
    .map(Json)
}

async fn impute(body: Result<Json<ImputeRequest>, JsonRejection>) -> ApiResult<ImputeResponse> {
    let Json(req) = body?;
    blocking(move || {
        let state = engine::fit_window(&req.window, &req.model, None)?;
        let imp = engine::impute(&state);
        Ok(ImputeResponse::new(&state, imp))
    })
    .await
    .map(Json)
}

async fn forecast(
    body: Result<Json<ForecastRequest>, JsonRejection>,
) -> ApiResult<ForecastResponse> {
    let Json(req) = body?;
    blocking(move || {
        let mut model = req.model;
        model.horizon = model.horizon.max(req.horizon);
        let state = engine::fit_window(&req.window, &model, None)?;
        Ok(ForecastResponse {
            forecast: engine::forecast(&state, req.horizon)?,
            summary: FitSummary::from(&state),
        })
    })
    .await
    .map(Json)
}

async fn inject(body: Result<Json<InjectRequest>, JsonRejection>) -> ApiResult<Injection> {
    let Json(req) = body?;
    blocking(move || data::inject_outliers(&req.window, req.fraction, req.scale, req.seed))
        .await
        .map(Json)
}

async fn bench(
    body: Result<Json<ExperimentConfig>, JsonRejection>,
) -> ApiResult<ExperimentOutput> {
    let Json(cfg) = body?;
    blocking(move || experiment::run_experiment(&cfg)).await.map(Json)
}

async fn create_stream(
    State(app): State<AppState>,
    body: Result<Json<CreateStream>, JsonRejection>,
) -> Result<(StatusCode, Json<StreamInfo>), ApiError> {
    let Json(req) = body?;
    let columns_seen = req.window.t();
    let state = blocking(move || engine::fit_window(&req.window, &req.model, None)).await?;
    let id = Uuid::new_v4();
    let session = Session {
        state,
        columns_seen,
    };
    let info = session.info(id);
    app.streams
        .lock()
        .expect("stream table poisoned")
        .insert(id, Arc::new(tokio::sync::Mutex::new(session)));
    tracing::info!(%id, "stream created");
    Ok((StatusCode::CREATED, Json(info)))
}

async fn stream_info(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<StreamInfo> {
    let (uuid, session) = app.session(&id)?;
    let session = session.lock().await;
    Ok(Json(session.info(uuid)))
}

async fn delete_stream(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    let (uuid, _) = app.session(&id)?;
    app.streams.lock().expect("stream table poisoned").remove(&uuid);
    Ok(StatusCode::NO_CONTENT)
}

async fn push_columns(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<PushColumns>, JsonRejection>,
) -> ApiResult<PushResponse> {
    let Json(req) = body?;
    let (uuid, session) = app.session(&id)?;
    let mut session = session.lock().await;
    let start = session.state.clone();
    let (state, estimates) = blocking(move || {
        let mut state = start;
        let mut estimates = Vec::with_capacity(req.columns.len());
        for column in &req.columns {
            state = engine::slide(&state, column)?;
            estimates.push(state.lag_estimate());
        }
        Ok((state, estimates))
    })
    .await?;
    session.columns_seen += estimates.len();
    session.state = state;
    Ok(Json(PushResponse {
        info: session.info(uuid),
        estimates,
    }))
}

#[derive(Deserialize)]
struct HorizonQuery {
    horizon: usize,
}

async fn stream_forecast(
    State(app): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<HorizonQuery>, QueryRejection>,
) -> ApiResult<ForecastResponse> {
    let Query(q) = query?;
    let (_, session) = app.session(&id)?;
    let session = session.lock().await;
    Ok(Json(ForecastResponse {
        forecast: engine::forecast(&session.state, q.horizon)?,
        summary: FitSummary::from(&session.state),
    }))
}

async fn stream_state(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<FilterState> {
    let (_, session) = app.session(&id)?;
    let session = session.lock().await;
    Ok(Json(session.state.clone()))
}
