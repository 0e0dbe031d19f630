//! HTTP/JSON interface: model metadata, guided sampling and extraction.

use std::net::SocketAddr;
use std::sync::Arc;

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use topoguide::diffusion::sample_seed;
use topoguide::field_model::VectorFieldGrid;
use topoguide::guidance::{GuidanceConfig, Models, SpecDocument, SpecPointDoc};
use topoguide::run_dir::{model_info, RunDirectory};
use topoguide::topo_extract::{extract_grid, CriticalPoint, ExtractConfig};
use topoguide::Error;

use crate::pipeline::{draw, resolve_guidance, SampleSettings};
use crate::ServeArgs;

/// Environment variable consulted for the port when none is given.
pub const PORT_ENV: &str = "TOPOGUIDE_PORT";
pub const DEFAULT_PORT: u16 = 8080;
pub const MAX_COUNT: usize = 64;
pub const MAX_RESOLUTION: usize = 512;

/// Shared server state: the loaded models, or why they are unavailable.
#[derive(Clone)]
pub struct AppState {
    models: Result<Arc<Models>, String>,
}

impl AppState {
    pub fn new(models: Models) -> Self {
        Self {
            models: Ok(Arc::new(models)),
        }
    }

    /// State for a run directory; an incomplete run still serves health and
    /// extraction, and reports the missing artifacts on model endpoints.
    pub fn from_run(run: &RunDirectory) -> Self {
        Self {
            models: run.load_models().map(Arc::new).map_err(|e| e.to_string()),
        }
    }

    fn models(&self) -> Result<Arc<Models>, ApiError> {
        self.models.clone().map_err(|m| ApiError(StatusCode::CONFLICT, m))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/model", get(model))
        .route("/api/sample", post(sample))
        .route("/api/extract", post(extract))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidArgument(_) | Error::Shape(_) => StatusCode::BAD_REQUEST,
            Error::Incomplete(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| bad_request(format!("malformed request: {e}")))
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn model(State(state): State<AppState>) -> Result<Response, ApiError> {
    let models = state.models()?;
    Ok(Json(model_info(&models)).into_response())
}

/// A specification document plus sampling parameters. An empty point list
/// draws unguided samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    #[serde(default)]
    pub points: Vec<SpecPointDoc>,
    #[serde(default)]
    pub omega: Option<f64>,
    #[serde(default)]
    pub t_start: Option<usize>,
    #[serde(default)]
    pub t_end: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "one")]
    pub count: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
}

fn one() -> usize {
    1
}

fn default_resolution() -> usize {
    64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleItem {
    pub seed: u64,
    pub field: VectorFieldGrid,
    pub critical_points: Vec<CriticalPoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleResponse {
    pub guidance: Option<GuidanceConfig>,
    pub samples: Vec<SampleItem>,
}

async fn sample(State(state): State<AppState>, body: Bytes) -> Result<Json<SampleResponse>, ApiError> {
    let req: SampleRequest = parse_body(&body)?;
    if req.count == 0 || req.count > MAX_COUNT {
        return Err(bad_request(format!("count: {} outside [1, {MAX_COUNT}]", req.count)));
    }
    if req.resolution < 2 || req.resolution > MAX_RESOLUTION {
        return Err(bad_request(format!("resolution: {} outside [2, {MAX_RESOLUTION}]", req.resolution)));
    }
    let doc = SpecDocument {
        points: req.points,
        omega: req.omega,
        t_start: req.t_start,
        t_end: req.t_end,
        seed: req.seed,
    };
    let spec = if doc.points.is_empty() { None } else { Some(doc.to_spec()?) };
    let guidance = resolve_guidance(GuidanceConfig::default(), Some(&doc), None, None, None);
    let models = state.models()?;
    if spec.is_some() {
        guidance.validate(models.diffusion.schedule.steps())?;
    }
    let settings = SampleSettings {
        guidance,
        resolution: req.resolution,
        extract: ExtractConfig::default(),
    };
    let base = req.seed.unwrap_or(0);
    let seeds: Vec<u64> = (0..req.count).map(|i| sample_seed(base, i)).collect();
    let outputs = tokio::task::spawn_blocking(move || draw(&models, spec.as_ref(), &settings, &seeds))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(SampleResponse {
        guidance: (!doc.points.is_empty()).then_some(guidance),
        samples: outputs
            .into_iter()
            .map(|o| SampleItem {
                seed: o.seed,
                field: o.grid,
                critical_points: o.critical_points,
            })
            .collect(),
    }))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridDoc {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractRequest {
    field: GridDoc,
    #[serde(default)]
    extract: Option<ExtractConfig>,
}

async fn extract(body: Bytes) -> Result<Json<serde_json::Value>, ApiError> {
    let req: ExtractRequest = parse_body(&body)?;
    let grid = VectorFieldGrid::new(req.field.width, req.field.height, req.field.values)
        .map_err(|e| bad_request(format!("field: {e}")))?;
    let cfg = req.extract.unwrap_or_default();
    if cfg.grid_res > 1024 || cfg.samples_per_cell > 4096 {
        return Err(bad_request("extract: grid_res or samples_per_cell too large"));
    }
    let cps = tokio::task::spawn_blocking(move || extract_grid(&grid, &cfg))
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(json!({ "critical_points": cps })))
}

/// Port precedence: command line, then environment, then the default.
pub fn resolve_port(cli: Option<u16>, env: Option<&str>) -> anyhow::Result<u16> {
    if let Some(p) = cli {
        return Ok(p);
    }
    match env {
        Some(s) => s.trim().parse().with_context(|| format!("{PORT_ENV}={s:?} is not a port")),
        None => Ok(DEFAULT_PORT),
    }
}

pub fn serve_blocking(a: &ServeArgs) -> anyhow::Result<()> {
    let port = resolve_port(a.port, std::env::var(PORT_ENV).ok().as_deref())?;
    let addr: SocketAddr = format!("{}:{port}", a.host).parse().context("bad listen address")?;
    let run = RunDirectory::new(&a.model);
    let state = AppState::from_run(&run);
    if let Err(m) = &state.models {
        eprintln!("warning: {m}; model endpoints will answer 409");
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{addr}");
        axum::serve(listener, router(state)).await?;
        Ok(())
    })
}
