//! HTTP front end. Every endpoint is stateless apart from the loaded
//! checkpoint, which is installed once and then shared read-only.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use log::{error, info};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

use region_restore::evaluation::{masked_noref, psnr_y, ssim_y, ScorerRegistry};
use region_restore::image::{Image, Plane};
use region_restore::inference::{RestoreRequest, RestoreResult, Restorer};
use region_restore::Error;

use crate::ckpt::load_restorer;

const BODY_LIMIT: usize = 32 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    pub checkpoint: Option<PathBuf>,
    pub max_side: usize,
    pub request_timeout_secs: u64,
    /// Restores allowed to run at once.
    pub max_concurrent: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            checkpoint: None,
            max_side: 512,
            request_timeout_secs: 300,
            max_concurrent: 1,
        }
    }
}

impl ServiceConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.port == 0 {
            return Err("port must be in [1, 65535]".into());
        }
        if self.max_side == 0 || !self.max_side.is_multiple_of(4) {
            return Err(format!("max side must be a positive multiple of 4, got {}", self.max_side));
        }
        if self.max_concurrent == 0 {
            return Err("max concurrent restores must be >= 1".into());
        }
        Ok(())
    }
}

struct Loaded {
    restorer: Arc<Restorer>,
    checkpoint_id: String,
}

#[derive(Clone)]
pub struct AppState {
    loaded: Arc<RwLock<Option<Loaded>>>,
    config: Arc<ServiceConfig>,
    permits: Arc<Semaphore>,
    registry: Arc<ScorerRegistry>,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        let permits = Arc::new(Semaphore::new(config.max_concurrent.max(1)));
        Self {
            loaded: Arc::new(RwLock::new(None)),
            config: Arc::new(config),
            permits,
            registry: Arc::new(ScorerRegistry::default()),
        }
    }

    pub fn install(&self, restorer: Restorer, checkpoint_id: String) {
        *self.loaded.write().expect("state lock") = Some(Loaded {
            restorer: Arc::new(restorer),
            checkpoint_id,
        });
    }

    pub fn is_ready(&self) -> bool {
        self.loaded.read().expect("state lock").is_some()
    }

    fn current(&self) -> Option<(Arc<Restorer>, String)> {
        self.loaded
            .read()
            .expect("state lock")
            .as_ref()
            .map(|l| (l.restorer.clone(), l.checkpoint_id.clone()))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/restore", post(restore))
        .route("/api/preview-mask", post(preview_mask))
        .route("/api/evaluate", post(evaluate))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Binds, starts answering (health reports 503), then loads the
/// checkpoint in the background.
pub async fn serve(config: ServiceConfig) -> std::io::Result<()> {
    let addr: SocketAddr = format!("{}:{}", config.bind, config.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, format!("bind address: {e}")))?;
    let state = AppState::new(config.clone());
    if let Some(path) = config.checkpoint.clone() {
        let st = state.clone();
        tokio::task::spawn_blocking(move || match load_restorer(&path) {
            Ok((restorer, id)) => {
                info!("checkpoint {id} loaded from {}", path.display());
                st.install(restorer, id);
            }
            Err(e) => error!("failed to load checkpoint {}: {e}", path.display()),
        });
    }
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    detail: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, detail: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            detail: detail.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::MalformedInstruction(_) => (StatusCode::BAD_REQUEST, "malformed_instruction"),
            Error::InvalidInstruction(_) => (StatusCode::BAD_REQUEST, "invalid_instruction"),
            Error::Shape(_) | Error::MaskShapeMismatch { .. } | Error::Image(_) | Error::TooSmall(_) => {
                (StatusCode::BAD_REQUEST, "invalid_image")
            }
            Error::EmptyMask => (StatusCode::BAD_REQUEST, "empty_mask"),
            Error::InvalidConfig(_) => (StatusCode::BAD_REQUEST, "invalid_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.kind, "detail": self.detail }))).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestoreBody {
    /// Base64-encoded PNG.
    pub image: String,
    pub instruction: String,
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn default_steps() -> usize {
    region_restore::inference::DEFAULT_STEPS
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prompts {
    pub backbone: String,
    pub control: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timings {
    pub decode: f64,
    pub inference: f64,
    pub encode: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RestoreResponse {
    pub image: String,
    pub mask: String,
    pub prompts: Prompts,
    pub timings_ms: Timings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreviewResponse {
    pub mask: String,
    pub prompts: Prompts,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateBody {
    pub image: String,
    pub reference: String,
    /// Optional target-region mask; without it only full-image metrics
    /// are reported.
    #[serde(default)]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvaluateResponse {
    pub psnr_y: f64,
    pub psnr_y_capped: bool,
    pub ssim_y: f64,
    pub mask_area_fraction: Option<f64>,
    pub psnr_y_target: Option<f64>,
    pub ssim_y_target: Option<f64>,
    pub psnr_y_background: Option<f64>,
    pub ssim_y_background: Option<f64>,
    pub noref_target: Option<f64>,
}

async fn health(State(state): State<AppState>) -> Response {
    match state.current() {
        Some((_, id)) => (StatusCode::OK, Json(json!({ "status": "ok", "checkpoint_id": id }))).into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "loading", "checkpoint_id": null })),
        )
            .into_response(),
    }
}

fn decode_png(field: &str, b64: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(b64.trim())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_image", format!("{field}: bad base64: {e}")))
}

fn decode_image(state: &AppState, field: &str, b64: &str) -> Result<Image, ApiError> {
    let img = Image::from_png_bytes(&decode_png(field, b64)?)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_image", format!("{field}: {e}")))?;
    let (h, w) = img.shape();
    let max = state.config.max_side;
    if h > max || w > max {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            "image_too_large",
            format!("{field} is {h}x{w}; the limit is {max} per side"),
        ));
    }
    Ok(img)
}

fn decode_mask(field: &str, b64: &str) -> Result<Plane, ApiError> {
    Plane::from_png_bytes(&decode_png(field, b64)?)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_image", format!("{field}: {e}")))
}

fn ready(state: &AppState) -> Result<Arc<Restorer>, ApiError> {
    state
        .current()
        .map(|(r, _)| r)
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "not_ready", "checkpoint not loaded"))
}

/// Runs blocking inference under the concurrency cap and request timeout.
async fn run_blocking<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce() -> region_restore::Result<T> + Send + 'static,
) -> Result<T, ApiError> {
    let _permit = state
        .permits
        .clone()
        .acquire_owned()
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "shutting_down", "service is stopping"))?;
    let limit = Duration::from_secs(state.config.request_timeout_secs.max(1));
    match tokio::time::timeout(limit, tokio::task::spawn_blocking(f)).await {
        Err(_) => Err(ApiError::new(StatusCode::GATEWAY_TIMEOUT, "timeout", "request timed out")),
        Ok(Err(e)) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())),
        Ok(Ok(r)) => r.map_err(ApiError::from),
    }
}

fn prompts_of(result: &RestoreResult) -> Prompts {
    Prompts {
        backbone: result.prompts.backbone_prompt.clone(),
        control: result.prompts.control_prompt.clone(),
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

async fn restore(State(state): State<AppState>, Json(body): Json<RestoreBody>) -> Result<Json<RestoreResponse>, ApiError> {
    let start = Instant::now();
    let restorer = ready(&state)?;
    let lq = decode_image(&state, "image", &body.image)?;
    let decode = ms(start);
    let req = RestoreRequest::new(lq, body.instruction)
        .with_seed(body.seed)
        .with_steps(body.steps);
    // Surface grammar errors before queueing behind other restores.
    region_restore::instruction::parse_inference_instruction(&req.instruction)?;
    let t = Instant::now();
    let result = run_blocking(&state, move || restorer.restore(&req)).await?;
    let inference = ms(t);
    let t = Instant::now();
    let image = B64.encode(result.image.to_png_bytes()?);
    let mask = B64.encode(result.mask.to_png_bytes()?);
    let encode = ms(t);
    Ok(Json(RestoreResponse {
        image,
        mask,
        prompts: prompts_of(&result),
        timings_ms: Timings {
            decode,
            inference,
            encode,
            total: ms(start),
        },
    }))
}

async fn preview_mask(
    State(state): State<AppState>,
    Json(body): Json<RestoreBody>,
) -> Result<Json<PreviewResponse>, ApiError> {
    let restorer = ready(&state)?;
    let lq = decode_image(&state, "image", &body.image)?;
    let instruction = region_restore::instruction::parse_inference_instruction(&body.instruction)?;
    let prompts = region_restore::instruction::derive_prompts(&instruction);
    let req = RestoreRequest::new(lq, body.instruction)
        .with_seed(body.seed)
        .with_steps(body.steps);
    let mask = run_blocking(&state, move || restorer.preview_mask(&req)).await?;
    Ok(Json(PreviewResponse {
        mask: B64.encode(mask.to_png_bytes()?),
        prompts: Prompts {
            backbone: prompts.backbone_prompt,
            control: prompts.control_prompt,
        },
    }))
}

async fn evaluate(
    State(state): State<AppState>,
    Json(body): Json<EvaluateBody>,
) -> Result<Json<EvaluateResponse>, ApiError> {
    let image = decode_image(&state, "image", &body.image)?;
    let reference = decode_image(&state, "reference", &body.reference)?;
    let mask = body.mask.as_deref().map(|m| decode_mask("mask", m)).transpose()?;
    let registry = state.registry.clone();
    let report = run_blocking(&state, move || evaluate_pair(&image, &reference, mask.as_ref(), &registry)).await?;
    Ok(Json(report))
}

/// Full-image metrics plus, given a mask, target and background metrics.
/// A region without positive pixels reports null.
pub fn evaluate_pair(
    image: &Image,
    reference: &Image,
    mask: Option<&Plane>,
    registry: &ScorerRegistry,
) -> region_restore::Result<EvaluateResponse> {
    if image.shape() != reference.shape() {
        return Err(Error::Shape(format!(
            "image {:?} vs reference {:?}",
            image.shape(),
            reference.shape()
        )));
    }
    let full = psnr_y(image, reference, None)?;
    let mut out = EvaluateResponse {
        psnr_y: full.db,
        psnr_y_capped: full.capped,
        ssim_y: ssim_y(image, reference, None)?,
        ..Default::default()
    };
    if let Some(mask) = mask {
        if mask.shape() != image.shape() {
            return Err(Error::MaskShapeMismatch {
                mask: mask.shape(),
                image: image.shape(),
            });
        }
        let target = mask.threshold(0.5);
        let background = target.invert();
        let optional = |r: region_restore::Result<f64>| match r {
            Ok(v) => Ok(Some(v)),
            Err(Error::EmptyMask) => Ok(None),
            Err(e) => Err(e),
        };
        out.mask_area_fraction = Some(target.mean());
        out.psnr_y_target = optional(psnr_y(image, reference, Some(&target)).map(|p| p.db))?;
        out.ssim_y_target = optional(ssim_y(image, reference, Some(&target)))?;
        out.psnr_y_background = optional(psnr_y(image, reference, Some(&background)).map(|p| p.db))?;
        out.ssim_y_background = optional(ssim_y(image, reference, Some(&background)))?;
        out.noref_target = optional(masked_noref(image, &target, registry, "sharpness"))?;
    }
    Ok(out)
}
