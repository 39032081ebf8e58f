//! HTTP front end over trained checkpoints: graph validation, layout
//! composition and image generation.
//!
//! | method | path | body | success |
//! |---|---|---|---|
//! | GET | `/v1/health` | – | status and checkpoint hashes |
//! | GET | `/v1/vocab` | – | classes, relations, grid, depth bins, palette |
//! | POST | `/v1/validate` | graph document | `{valid, violations}` |
//! | POST | `/v1/layout` | graph document | boxes, mask summaries, layout raster |
//! | POST | `/v1/generate` | graph document | RGB image plus the layout response |
//!
//! Malformed documents get 400 with a line/column, documents that do not
//! fit the loaded vocabulary or violate graph invariants get 422, and a
//! request needing a checkpoint that was not loaded gets 409. State is
//! read-only after startup, so identical requests return identical bytes.

mod api;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tower_http::services::ServeDir;

use sg2scene_core::checkpoint::Checkpoint;
use sg2scene_core::generator::Generator;
use sg2scene_core::graph::{parse_graph, parse_graph_unchecked, validate_graph, violation_path, SceneGraph, Schema};
use sg2scene_core::harness::experiment::{hex, ExperimentConfig};
use sg2scene_core::processor::Processor;

pub use api::{
    CheckpointInfo, ClassEntry, ErrorBody, GenerateResponse, HealthResponse, LayoutImage, LayoutResponse, MaskSummary,
    NodeBox, RelationEntry, RgbImage, ValidateResponse, ViolationEntry, VocabResponse,
};

/// Layout and image size used when no experiment config is supplied.
pub const DEFAULT_RESOLUTION: [usize; 2] = [64, 128];

pub struct Loaded<T> {
    pub model: T,
    pub sha256: String,
    pub step: u64,
}

/// Everything the handlers read. Built once at startup, never mutated.
pub struct ServiceState {
    pub schema: Schema,
    /// `[H, W]` of layouts and images.
    pub resolution: [usize; 2],
    pub processor: Option<Loaded<Processor>>,
    pub generator: Option<Loaded<Generator>>,
    pub config: Option<ExperimentConfig>,
    /// Static editor assets served under `/app`.
    pub app_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum StartupError {
    #[error("{path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),
}

impl ServiceState {
    /// A state with no models loaded.
    pub fn new(schema: Schema, resolution: [usize; 2]) -> Self {
        Self {
            schema,
            resolution,
            processor: None,
            generator: None,
            config: None,
            app_dir: None,
        }
    }

    /// Loads checkpoints from files. The schema comes from `config` when
    /// given, else from the checkpoints; all must agree.
    pub fn load(
        processor: Option<&Path>,
        generator: Option<&Path>,
        config: Option<ExperimentConfig>,
    ) -> Result<Self, StartupError> {
        let read = |p: &Path| {
            std::fs::read(p).map_err(|e| StartupError::Checkpoint {
                path: p.display().to_string(),
                message: e.to_string(),
            })
        };
        let pb = processor.map(|p| read(p).map(|b| (p, b))).transpose()?;
        let gb = generator.map(|p| read(p).map(|b| (p, b))).transpose()?;
        let mut state: Option<Self> = config.map(|c| {
            let mut s = Self::new(c.schema.clone(), c.resolution);
            s.config = Some(c);
            s
        });
        if let Some((path, bytes)) = pb {
            state = Some(Self::attach(state, path, &bytes, Self::with_processor_bytes)?);
        }
        if let Some((path, bytes)) = gb {
            state = Some(Self::attach(state, path, &bytes, Self::with_generator_bytes)?);
        }
        Ok(state.unwrap_or_else(|| Self::new(Schema::default(), DEFAULT_RESOLUTION)))
    }

    fn attach(
        state: Option<Self>,
        path: &Path,
        bytes: &[u8],
        add: fn(Self, &[u8]) -> Result<Self, StartupError>,
    ) -> Result<Self, StartupError> {
        let base = match state {
            Some(s) => s,
            None => {
                let ck = Checkpoint::from_bytes(bytes).map_err(|e| StartupError::Checkpoint {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                Self::new(ck.spec.schema().clone(), DEFAULT_RESOLUTION)
            }
        };
        add(base, bytes).map_err(|e| match e {
            StartupError::Checkpoint { message, .. } => StartupError::Checkpoint {
                path: path.display().to_string(),
                message,
            },
            other => other,
        })
    }

    pub fn with_processor_bytes(mut self, bytes: &[u8]) -> Result<Self, StartupError> {
        let (ck, sha256) = self.checkpoint(bytes)?;
        let step = ck.step;
        let (model, _) = ck.into_processor().map_err(bad_checkpoint)?;
        self.processor = Some(Loaded { model, sha256, step });
        Ok(self)
    }

    pub fn with_generator_bytes(mut self, bytes: &[u8]) -> Result<Self, StartupError> {
        let (ck, sha256) = self.checkpoint(bytes)?;
        let step = ck.step;
        let (model, _) = ck.into_generator().map_err(bad_checkpoint)?;
        let [h, w] = self.resolution;
        model
            .check_input(&[1, self.schema.classes.len(), h, w])
            .map_err(|e| StartupError::Incompatible(e.to_string()))?;
        self.generator = Some(Loaded { model, sha256, step });
        Ok(self)
    }

    fn checkpoint(&self, bytes: &[u8]) -> Result<(Checkpoint, String), StartupError> {
        let ck = Checkpoint::from_bytes(bytes).map_err(bad_checkpoint)?;
        if ck.spec.schema() != &self.schema {
            return Err(StartupError::Incompatible(format!(
                "{} checkpoint was trained with a different schema",
                ck.spec.kind()
            )));
        }
        Ok((ck, hex(&Sha256::digest(bytes))))
    }

    pub fn with_app_dir(mut self, dir: PathBuf) -> Self {
        self.app_dir = Some(dir);
        self
    }

    /// Strict parse: syntax errors are 400, everything else 422.
    fn parse(&self, body: &str) -> Result<SceneGraph, ApiError> {
        parse_graph(body, &self.schema).map_err(ApiError::from_parse)
    }
}

fn bad_checkpoint(e: impl std::fmt::Display) -> StartupError {
    StartupError::Checkpoint {
        path: String::new(),
        message: e.to_string(),
    }
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: message.into(),
                line: None,
                column: None,
                path: None,
            },
        }
    }

    fn from_parse(e: sg2scene_core::error::ParseError) -> Self {
        let syntax = e.line > 0;
        let status = if syntax { StatusCode::BAD_REQUEST } else { StatusCode::UNPROCESSABLE_ENTITY };
        Self {
            status,
            body: ErrorBody {
                error: e.message.clone(),
                line: syntax.then_some(e.line),
                column: syntax.then_some(e.column),
                path: (!e.path.is_empty()).then(|| e.path.clone()),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    let mut r = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/vocab", get(vocab))
        .route("/v1/validate", post(validate))
        .route("/v1/layout", post(layout))
        .route("/v1/generate", post(generate));
    if let Some(dir) = &state.app_dir {
        r = r.nest_service("/app", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    r.with_state(state)
}

/// Binds `host:port` and serves until the process is stopped.
pub async fn serve(state: ServiceState, host: &str, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}

type Shared = State<Arc<ServiceState>>;

async fn health(State(s): Shared) -> Json<HealthResponse> {
    Json(api::health(&s))
}

async fn vocab(State(s): Shared) -> Json<VocabResponse> {
    Json(api::vocab(&s))
}

async fn validate(State(s): Shared, body: String) -> Result<Json<ValidateResponse>, ApiError> {
    let g = match parse_graph_unchecked(&body, &s.schema) {
        Ok(g) => g,
        Err(e) if e.line > 0 => return Err(ApiError::from_parse(e)),
        Err(e) => {
            return Ok(Json(ValidateResponse {
                valid: false,
                violations: vec![ViolationEntry {
                    path: e.path,
                    reason: e.message,
                }],
            }))
        }
    };
    let violations: Vec<ViolationEntry> = validate_graph(&g, &s.schema)
        .into_iter()
        .map(|v| ViolationEntry {
            path: violation_path(&v),
            reason: v.reason,
        })
        .collect();
    Ok(Json(ValidateResponse {
        valid: violations.is_empty(),
        violations,
    }))
}

async fn layout(State(s): Shared, body: String) -> Result<Json<LayoutResponse>, ApiError> {
    let g = s.parse(&body)?;
    if s.processor.is_none() {
        return Err(ApiError::new(StatusCode::CONFLICT, "no processor checkpoint loaded"));
    }
    run_blocking(move || api::layout(&s, &g)).await.map(Json)
}

async fn generate(State(s): Shared, body: String) -> Result<Json<GenerateResponse>, ApiError> {
    let g = s.parse(&body)?;
    if s.processor.is_none() {
        return Err(ApiError::new(StatusCode::CONFLICT, "no processor checkpoint loaded"));
    }
    if s.generator.is_none() {
        return Err(ApiError::new(StatusCode::CONFLICT, "no generator checkpoint loaded"));
    }
    run_blocking(move || api::generate(&s, &g)).await.map(Json)
}

async fn run_blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, String> + Send + 'static,
) -> Result<T, ApiError> {
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(v)) => Ok(v),
        Ok(Err(e)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e)),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    }
}
