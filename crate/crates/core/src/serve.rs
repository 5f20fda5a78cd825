//! HTTP inference service: ROI classification with coarse collapse, optional
//! saliency and atlas projection, plus model and atlas listings.
//!
//! Endpoints: `POST /analyze`, `GET /models`, `GET /atlas`,
//! `GET /atlas/thumb/{id}`, `GET /healthz`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::atlas::{ProjectionAtlas, UmapParams};
use crate::cohort::{FineLabel, Source};
use crate::encoder::{Classifier, Condition, Family};
use crate::error::{Error, IoContext, Result};
use crate::evaluator::collapse_coarse;
use crate::saliency::{gradcam, quadrants};
use crate::tiler::{to_model_input, RoiImage, INPUT_SIZE, REFERENCE_MICRONS_PER_PIXEL};
use crate::trainer::Checkpoint;
use crate::util;

pub const MODELS_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_MAX_IMAGE_BYTES: usize = 16 * 1024 * 1024;
/// Smallest square side, in reference-scale pixels, an ROI may reduce to.
pub const MIN_ROI_SIDE: u32 = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelsFile {
    schema_version: u32,
    #[serde(default)]
    models: BTreeMap<String, ModelFileEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFileEntry {
    checkpoint: PathBuf,
}

/// Model registry file: `[models."<id>"] checkpoint = "<path>"`, paths relative to the file.
pub fn read_model_registry(path: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let file: ModelsFile = toml::from_str(&text)?;
    if file.schema_version != MODELS_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "unsupported model registry schema_version {}",
            file.schema_version
        )));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(file
        .models
        .into_iter()
        .map(|(id, e)| {
            let p = if e.checkpoint.is_relative() {
                base.join(e.checkpoint)
            } else {
                e.checkpoint
            };
            (id, p)
        })
        .collect())
}

pub fn write_model_registry(models: &BTreeMap<String, PathBuf>, path: &Path) -> Result<()> {
    let file = ModelsFile {
        schema_version: MODELS_SCHEMA_VERSION,
        models: models
            .iter()
            .map(|(k, v)| (k.clone(), ModelFileEntry { checkpoint: v.clone() }))
            .collect(),
    };
    let text = toml::to_string(&file).map_err(|e| Error::Format(e.to_string()))?;
    util::write_atomic(path, text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model_id: String,
    pub condition: Condition,
    pub family: Family,
    pub feature_dim: usize,
    pub status: ModelStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelStatus {
    Loading,
    Ready,
    Failed,
}

struct ModelSlot {
    info: ModelInfo,
    classifier: Option<Arc<Mutex<Classifier>>>,
}

/// Loaded models and atlas. Each model's inference is serialized by its own lock.
pub struct AppState {
    models: RwLock<BTreeMap<String, ModelSlot>>,
    atlas: Option<Arc<ProjectionAtlas>>,
    max_image_bytes: usize,
}

impl AppState {
    pub fn new(atlas: Option<ProjectionAtlas>, max_image_bytes: usize) -> Self {
        AppState {
            models: RwLock::new(BTreeMap::new()),
            atlas: atlas.map(Arc::new),
            max_image_bytes,
        }
    }

    pub fn insert(&self, model_id: &str, classifier: Classifier, condition: Condition) {
        let spec = classifier.encoder.spec();
        let info = ModelInfo {
            model_id: model_id.to_string(),
            condition,
            family: spec.family,
            feature_dim: spec.feature_dim,
            status: ModelStatus::Ready,
        };
        self.models.write().expect("models lock").insert(
            model_id.to_string(),
            ModelSlot {
                info,
                classifier: Some(Arc::new(Mutex::new(classifier))),
            },
        );
    }

    /// Registers a model that is not yet usable; `/analyze` answers 503 for it.
    pub fn insert_loading(&self, model_id: &str, condition: Condition, family: Family, feature_dim: usize) {
        self.models.write().expect("models lock").insert(
            model_id.to_string(),
            ModelSlot {
                info: ModelInfo {
                    model_id: model_id.to_string(),
                    condition,
                    family,
                    feature_dim,
                    status: ModelStatus::Loading,
                },
                classifier: None,
            },
        );
    }

    fn mark_failed(&self, model_id: &str) {
        if let Some(s) = self.models.write().expect("models lock").get_mut(model_id) {
            s.info.status = ModelStatus::Failed;
        }
    }

    pub fn model_infos(&self) -> Vec<ModelInfo> {
        self.models
            .read()
            .expect("models lock")
            .values()
            .map(|s| s.info.clone())
            .collect()
    }

    /// Registers every checkpoint as loading and loads them on a background thread.
    pub fn load_registry_in_background(self: &Arc<Self>, models: BTreeMap<String, PathBuf>) -> std::thread::JoinHandle<()> {
        for id in models.keys() {
            self.insert_loading(id, Condition::Lp, Family::CnnClass, 0);
        }
        let state = Arc::clone(self);
        std::thread::spawn(move || {
            for (id, path) in models {
                match Checkpoint::load(&path).and_then(|c| Ok((c.config.condition, c.classifier()?))) {
                    Ok((condition, clf)) => {
                        log::info!("model {id} ready");
                        state.insert(&id, clf, condition);
                    }
                    Err(e) => {
                        log::error!("model {id} failed to load from {}: {e}", path.display());
                        state.mark_failed(&id);
                    }
                }
            }
        })
    }
}

/// Rectangle in image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Roi {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeRequest {
    /// Base64-encoded PNG, JPEG or TIFF.
    pub image: String,
    /// Whole image when absent.
    #[serde(default)]
    pub roi: Option<Roi>,
    pub microns_per_pixel: f64,
    pub model_id: String,
    #[serde(default)]
    pub want_saliency: bool,
    #[serde(default)]
    pub want_projection: bool,
    #[serde(default)]
    pub target_class: Option<FineLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeResponse {
    pub model_id: String,
    pub fine_probs: Vec<f64>,
    /// GLIOMA, M, L, B.
    pub coarse_probs: Vec<f64>,
    pub subpatch_probs: Vec<Vec<f64>>,
    pub predicted: FineLabel,
    /// Base64 PNG heat map at model input resolution.
    pub saliency: Option<String>,
    pub saliency_grid: Option<Vec<f64>>,
    pub projection: Option<[f64; 2]>,
    pub latency_ms: f64,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidArgument(_) | Error::ShapeMismatch { .. } | Error::Image(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

/// Crops the ROI, brings it to the reference scale and center-crops a square.
pub fn prepare_roi(image: &RgbImage, roi: Option<Roi>, microns_per_pixel: f64) -> Result<RgbImage> {
    if !(microns_per_pixel.is_finite() && microns_per_pixel > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "microns_per_pixel must be positive, got {microns_per_pixel}"
        )));
    }
    let (w, h) = image.dimensions();
    let r = roi.unwrap_or(Roi {
        x: 0,
        y: 0,
        width: w,
        height: h,
    });
    if r.width == 0 || r.height == 0 || r.x as u64 + r.width as u64 > w as u64 || r.y as u64 + r.height as u64 > h as u64 {
        return Err(Error::InvalidArgument(format!(
            "roi {r:?} is outside the {w}x{h} image"
        )));
    }
    let crop = image::imageops::crop_imm(image, r.x, r.y, r.width, r.height).to_image();
    let scaled = RoiImage::new(crop, microns_per_pixel)?
        .rescale_to(REFERENCE_MICRONS_PER_PIXEL)
        .pixels;
    let (sw, sh) = scaled.dimensions();
    let side = sw.min(sh);
    if side < MIN_ROI_SIDE {
        return Err(Error::InvalidArgument(format!(
            "roi is {side}px at the reference scale; at least {MIN_ROI_SIDE}px is needed"
        )));
    }
    Ok(image::imageops::crop_imm(&scaled, (sw - side) / 2, (sh - side) / 2, side, side).to_image())
}

/// Classification of a prepared square: mean probability over its four quadrants.
pub fn analyze_square(
    classifier: &Classifier,
    square: &RgbImage,
    want_saliency: bool,
    target: Option<FineLabel>,
    atlas: Option<&ProjectionAtlas>,
) -> Result<(Vec<f64>, Vec<Vec<f64>>, Option<crate::saliency::SaliencyMap>, Option<[f64; 2]>)> {
    let half = square.width() / 2;
    let sub: Vec<Vec<f64>> = quadrants(square, half)
        .into_iter()
        .map(|(_, q)| classifier.predict(&to_model_input(&q)))
        .collect::<Result<_>>()?;
    let mut fine = vec![0.0; sub[0].len()];
    for p in &sub {
        for (f, v) in fine.iter_mut().zip(p) {
            *f += v / sub.len() as f64;
        }
    }
    let whole = to_model_input(square);
    let saliency = if want_saliency {
        let t = target.unwrap_or_else(|| FineLabel::from_index(util::argmax(&fine)).expect("six classes"));
        Some(gradcam(classifier, &whole, t)?)
    } else {
        None
    };
    let projection = match atlas {
        Some(a) => Some(a.project_query(&classifier.encoder.features(&whole)?)?),
        None => None,
    };
    Ok((fine, sub, saliency, projection))
}

async fn analyze(
    State(state): State<Arc<AppState>>,
    Json(req): Json<AnalyzeRequest>,
) -> std::result::Result<Json<AnalyzeResponse>, ApiError> {
    let started = Instant::now();
    let classifier = {
        let models = state.models.read().expect("models lock");
        let slot = models
            .get(&req.model_id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown model `{}`", req.model_id)))?;
        match (&slot.classifier, slot.info.status) {
            (Some(c), _) => Arc::clone(c),
            (None, ModelStatus::Failed) => {
                return Err(ApiError::new(
                    StatusCode::SERVICE_UNAVAILABLE,
                    format!("model `{}` failed to load", req.model_id),
                ))
            }
            (None, _) => {
                return Err(ApiError::new(
                    StatusCode::SERVICE_UNAVAILABLE,
                    format!("model `{}` is still loading", req.model_id),
                ))
            }
        }
    };
    let bytes = B64
        .decode(req.image.as_bytes())
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("image is not base64: {e}")))?;
    if bytes.len() > state.max_image_bytes {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image of {} bytes exceeds {}", bytes.len(), state.max_image_bytes),
        ));
    }
    if req.want_projection && state.atlas.is_none() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "no atlas is loaded"));
    }
    let atlas = if req.want_projection { state.atlas.clone() } else { None };
    let result = tokio::task::spawn_blocking(move || -> Result<AnalyzeResponse> {
        let image = image::load_from_memory(&bytes)?.to_rgb8();
        let square = prepare_roi(&image, req.roi, req.microns_per_pixel)?;
        let clf = classifier.lock().expect("model lock");
        let (fine, sub, saliency, projection) =
            analyze_square(&clf, &square, req.want_saliency, req.target_class, atlas.as_deref())?;
        let (saliency_png, grid) = match saliency {
            Some(m) => (Some(B64.encode(m.heatmap_png(INPUT_SIZE as u32)?)), Some(m.values)),
            None => (None, None),
        };
        Ok(AnalyzeResponse {
            model_id: req.model_id,
            coarse_probs: collapse_coarse(&fine).to_vec(),
            predicted: FineLabel::from_index(util::argmax(&fine)).expect("six classes"),
            fine_probs: fine,
            subpatch_probs: sub,
            saliency: saliency_png,
            saliency_grid: grid,
            projection,
            latency_ms: 0.0,
        })
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let mut resp = result?;
    resp.latency_ms = started.elapsed().as_secs_f64() * 1000.0;
    Ok(Json(resp))
}

async fn models(State(state): State<Arc<AppState>>) -> Json<Vec<ModelInfo>> {
    Json(state.model_infos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasEntry {
    pub id: String,
    pub coords: [f64; 2],
    pub label: FineLabel,
    pub source: Source,
    pub subtype: Option<String>,
    pub case_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasListing {
    pub params: UmapParams,
    pub points: Vec<AtlasEntry>,
}

async fn atlas(State(state): State<Arc<AppState>>) -> std::result::Result<Json<AtlasListing>, ApiError> {
    let a = state
        .atlas
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no atlas is loaded"))?;
    Ok(Json(AtlasListing {
        params: a.params,
        points: a
            .points
            .iter()
            .map(|p| AtlasEntry {
                id: p.id.clone(),
                coords: p.coords,
                label: p.label,
                source: p.source,
                subtype: p.subtype.clone(),
                case_id: p.case_id.clone(),
            })
            .collect(),
    }))
}

async fn thumb(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> std::result::Result<Response, ApiError> {
    let missing = || ApiError::new(StatusCode::NOT_FOUND, format!("no thumbnail `{id}`"));
    let a = state.atlas.as_ref().ok_or_else(missing)?;
    let path = a.point(&id).and_then(|p| p.thumbnail.clone()).ok_or_else(missing)?;
    let bytes = tokio::fs::read(&path).await.map_err(|_| missing())?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn healthz() -> &'static str {
    "ok"
}

pub fn router(state: Arc<AppState>) -> Router {
    // Base64 inflates by 4/3; leave room for the JSON envelope.
    let body_limit = state.max_image_bytes / 3 * 4 + 64 * 1024;
    Router::new()
        .route("/analyze", post(analyze))
        .route("/models", get(models))
        .route("/atlas", get(atlas))
        .route("/atlas/thumb/{id}", get(thumb))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub bind: SocketAddr,
    pub models: Option<PathBuf>,
    pub atlas: Option<PathBuf>,
    pub max_image_bytes: usize,
}

/// Builds the state from `config`; checkpoints finish loading in the background.
pub fn build_state(config: &ServeConfig) -> Result<Arc<AppState>> {
    let atlas = match &config.atlas {
        Some(p) => Some(ProjectionAtlas::load(p)?),
        None => None,
    };
    let state = Arc::new(AppState::new(atlas, config.max_image_bytes));
    if let Some(p) = &config.models {
        let models = read_model_registry(p)?;
        state.load_registry_in_background(models);
    }
    Ok(state)
}

/// Serves until Ctrl-C.
pub async fn serve(config: ServeConfig) -> Result<()> {
    let state = build_state(&config)?;
    let listener = tokio::net::TcpListener::bind(config.bind)
        .await
        .map_err(|e| Error::Io {
            path: PathBuf::from(config.bind.to_string()),
            source: e,
        })?;
    log::info!("listening on {}", config.bind);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::Io {
            path: PathBuf::from(config.bind.to_string()),
            source: e,
        })
}
