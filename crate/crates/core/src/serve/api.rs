//! Request handlers and wire types for `/api/v1`.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{Multipart, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::Json;
use base64::Engine;
use candle_core::{DType, Tensor};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::registry::{RegisteredModel, Registry};
use super::AppState;
use crate::dataio::{decode_image, preprocess, resize_bilinear, BinaryMask, FloatImage, ImageRecord, Rle};
use crate::explain::{grad_cam, overlay, png_bytes, target_names, Colormap, Layer};
use crate::nn::Task;
use crate::train::fit::MARKER_NAMES;
use crate::Error;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self { status, kind, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "undecodable_image", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidArgument(_) => StatusCode::BAD_REQUEST,
            Error::Image(_) | Error::Validation(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorResponse { error: ErrorBody { kind: self.kind.to_string(), message: self.message } };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub version: String,
    pub input_side: usize,
    pub threshold: f64,
    pub backbone: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    /// "loading" until the registry is in memory, then "ok".
    pub status: String,
    pub models: BTreeMap<String, ModelInfo>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyPrediction {
    pub id: String,
    pub probability: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub task: String,
    pub model_version: String,
    pub threshold: f64,
    pub predictions: Vec<ClassifyPrediction>,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub task: String,
    pub id: String,
    pub model_version: String,
    pub mask_threshold: f64,
    pub overlay_alpha: f64,
    /// Thresholded mask at the upload's resolution.
    pub mask: Rle,
    pub mask_pixels: usize,
    pub mean_probability: f64,
    /// Base64 PNG.
    pub overlay_png: String,
    /// Per-pixel probabilities at the upload's resolution, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f32>>,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerPrediction {
    pub name: String,
    pub probability: f64,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubtypeResponse {
    pub task: String,
    pub id: String,
    pub model_version: String,
    pub threshold: f64,
    /// Always true: marker predictions are research output.
    pub exploratory: bool,
    pub markers: Vec<MarkerPrediction>,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainResponse {
    pub task: String,
    pub id: String,
    pub model_version: String,
    pub target: String,
    pub target_index: usize,
    pub layer: String,
    pub all_zero: bool,
    pub side: usize,
    /// Row-major `side * side` saliency in [0, 1].
    pub saliency: Vec<f32>,
    /// Base64 16-bit grayscale PNG of the saliency grid.
    pub saliency_png16: String,
    pub overlay_alpha: f64,
    /// Base64 PNG at the upload's resolution.
    pub overlay_png: String,
    pub latency_ms: f64,
}

struct Upload {
    name: String,
    bytes: Vec<u8>,
}

#[derive(Default)]
struct Form {
    images: Vec<Upload>,
    fields: BTreeMap<String, String>,
}

impl Form {
    async fn read(mut mp: Multipart) -> Result<Self, ApiError> {
        let mut form = Form::default();
        while let Some(field) = mp.next_field().await.map_err(|e| ApiError::bad_request(format!("malformed multipart body: {e}")))? {
            let name = field.name().unwrap_or_default().to_string();
            if name == "image" || name == "images" || field.file_name().is_some() {
                let file = field.file_name().map(str::to_string).unwrap_or_else(|| format!("image{}", form.images.len()));
                let bytes = field.bytes().await.map_err(|e| ApiError::bad_request(format!("reading upload: {e}")))?;
                form.images.push(Upload { name: file, bytes: bytes.to_vec() });
            } else {
                let text = field.text().await.map_err(|e| ApiError::bad_request(format!("reading field {name}: {e}")))?;
                form.fields.insert(name, text.trim().to_string());
            }
        }
        Ok(form)
    }

    fn number(&self, key: &str, default: f64) -> Result<f64, ApiError> {
        match self.fields.get(key) {
            None => Ok(default),
            Some(v) => v.parse::<f64>().map_err(|_| ApiError::bad_request(format!("{key} must be a number, got '{v}'"))),
        }
    }

    fn probability(&self, key: &str, default: f64) -> Result<f64, ApiError> {
        let t = self.number(key, default)?;
        if t > 0.0 && t < 1.0 {
            Ok(t)
        } else {
            Err(ApiError::bad_request(format!("{key} must lie strictly between 0 and 1, got {t}")))
        }
    }

    fn flag(&self, key: &str) -> bool {
        matches!(self.fields.get(key).map(|s| s.to_ascii_lowercase()).as_deref(), Some("true" | "1" | "yes" | "on"))
    }

    fn one_image(&mut self) -> Result<Upload, ApiError> {
        match self.images.len() {
            1 => Ok(self.images.remove(0)),
            0 => Err(ApiError::bad_request("no image uploaded (multipart field 'image')")),
            n => Err(ApiError::bad_request(format!("this endpoint takes one image, got {n}"))),
        }
    }
}

fn registry(st: &AppState) -> Result<Arc<Registry>, ApiError> {
    st.registry().ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "loading", "models are still loading"))
}

fn entry(reg: &Registry, task: Task) -> Result<&RegisteredModel, ApiError> {
    reg.get(task)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no_model", format!("no {task} model is registered")))
}

fn decode(up: &Upload) -> Result<RgbImage, ApiError> {
    let img = decode_image(&up.bytes).map_err(|e| ApiError::unprocessable(format!("{}: {e}", up.name)))?;
    Ok(img)
}

fn prepare(up: &Upload, side: usize) -> Result<(RgbImage, FloatImage), ApiError> {
    let rgb = decode(up)?;
    let rec = ImageRecord::new(up.name.clone(), "upload", rgb.clone(), "upload")
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    Ok((rgb, preprocess(&rec, side)?))
}

fn batch_tensor(images: &[FloatImage], side: usize) -> crate::Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * 3 * side * side);
    for im in images {
        data.extend_from_slice(&im.data);
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, side, side), &candle_core::Device::Cpu)?)
}

fn b64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

async fn blocking<T: Send + 'static>(st: &AppState, f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    let _permit = st.workers.acquire().await.map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "shutting_down", "server is shutting down"))?;
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", format!("inference task failed: {e}")))?
}

pub async fn health(State(st): State<AppState>) -> Json<HealthResponse> {
    let Some(reg) = st.registry() else {
        return Json(HealthResponse { status: "loading".into(), models: BTreeMap::new() });
    };
    let models = reg
        .iter()
        .map(|(t, m)| {
            let info = ModelInfo {
                version: m.version.clone(),
                input_side: m.input_side,
                threshold: m.threshold,
                backbone: m.model.config.backbone.name().to_string(),
            };
            (t.name().to_string(), info)
        })
        .collect();
    Json(HealthResponse { status: "ok".into(), models })
}

pub async fn classify(State(st): State<AppState>, mp: Multipart) -> ApiResult<ClassifyResponse> {
    let started = Instant::now();
    let form = Form::read(mp).await?;
    let reg = registry(&st)?;
    let default = entry(&reg, Task::Classify)?.threshold;
    let threshold = form.probability("threshold", default)?;
    if form.images.is_empty() {
        return Err(ApiError::bad_request("no image uploaded (multipart field 'image')"));
    }
    st.audit(&form.images.iter().map(|u| (u.name.as_str(), u.bytes.as_slice())).collect::<Vec<_>>());
    let version = entry(&reg, Task::Classify)?.version.clone();
    let preds = blocking(&st, move || {
        let m = entry(&reg, Task::Classify)?;
        let mut floats = Vec::with_capacity(form.images.len());
        for up in &form.images {
            floats.push(prepare(up, m.input_side)?.1);
        }
        let p = m.model.predict(&batch_tensor(&floats, m.input_side)?).map_err(ApiError::from)?;
        let p = p.to_dtype(DType::F64).map_err(Error::from)?.flatten_all().map_err(Error::from)?.to_vec1::<f64>().map_err(Error::from)?;
        Ok(form
            .images
            .iter()
            .zip(p)
            .map(|(up, prob)| ClassifyPrediction { id: up.name.clone(), probability: prob, label: u8::from(prob >= threshold) })
            .collect::<Vec<_>>())
    })
    .await?;
    Ok(Json(ClassifyResponse {
        task: "classify".into(),
        model_version: version,
        threshold,
        predictions: preds,
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    }))
}

pub async fn segment(State(st): State<AppState>, mp: Multipart) -> ApiResult<SegmentResponse> {
    let started = Instant::now();
    let mut form = Form::read(mp).await?;
    let reg = registry(&st)?;
    let m = entry(&reg, Task::Segment)?;
    let mask_threshold = form.probability("mask_threshold", m.threshold)?;
    let alpha = form.number("overlay_alpha", 0.5)?;
    let want_probs = form.flag("return_probabilities");
    let up = form.one_image()?;
    st.audit(&[(up.name.as_str(), up.bytes.as_slice())]);
    let id = up.name.clone();
    let version = m.version.clone();
    let reg2 = reg.clone();
    let (rle, pixels, mean, png, probs) = blocking(&st, move || {
        let m = entry(&reg2, Task::Segment)?;
        let (rgb, f) = prepare(&up, m.input_side)?;
        let p = m.model.predict(&batch_tensor(&[f], m.input_side)?)?;
        let p = p.to_dtype(DType::F32).map_err(Error::from)?.flatten_all().map_err(Error::from)?.to_vec1::<f32>().map_err(Error::from)?;
        let (w, h) = rgb.dimensions();
        let (h, w) = (h as usize, w as usize);
        let full = resize_bilinear(&p, 1, m.input_side, m.input_side, h, w);
        let mask = BinaryMask::from_probabilities(h, w, &full, mask_threshold as f32)?;
        let mean = full.iter().map(|&v| v as f64).sum::<f64>() / full.len() as f64;
        let ov = overlay(&rgb, Layer::Mask(&mask), alpha, Colormap::Red);
        Ok((mask.to_rle(), mask.count(), mean, png_bytes(&ov)?, want_probs.then_some(full)))
    })
    .await?;
    Ok(Json(SegmentResponse {
        task: "segment".into(),
        id,
        model_version: version,
        mask_threshold,
        overlay_alpha: alpha.clamp(0.0, 1.0),
        mask: rle,
        mask_pixels: pixels,
        mean_probability: mean,
        overlay_png: b64(&png),
        probabilities: probs,
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    }))
}

pub async fn subtype(State(st): State<AppState>, mp: Multipart) -> ApiResult<SubtypeResponse> {
    let started = Instant::now();
    let mut form = Form::read(mp).await?;
    if !form.flag("enable") {
        return Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "subtype_disabled",
            "marker subtyping is exploratory and disabled by default; send enable=true to run it",
        ));
    }
    let reg = registry(&st)?;
    let m = entry(&reg, Task::Subtype)?;
    let threshold = form.probability("threshold", m.threshold)?;
    let version = m.version.clone();
    let up = form.one_image()?;
    st.audit(&[(up.name.as_str(), up.bytes.as_slice())]);
    let id = up.name.clone();
    let reg2 = reg.clone();
    let probs = blocking(&st, move || {
        let m = entry(&reg2, Task::Subtype)?;
        let (_, f) = prepare(&up, m.input_side)?;
        let p = m.model.predict(&batch_tensor(&[f], m.input_side)?)?;
        Ok(p.to_dtype(DType::F64).map_err(Error::from)?.flatten_all().map_err(Error::from)?.to_vec1::<f64>().map_err(Error::from)?)
    })
    .await?;
    let markers = MARKER_NAMES
        .iter()
        .zip(probs)
        .map(|(n, p)| MarkerPrediction { name: n.to_string(), probability: p, label: u8::from(p >= threshold) })
        .collect();
    Ok(Json(SubtypeResponse {
        task: "subtype".into(),
        id,
        model_version: version,
        threshold,
        exploratory: true,
        markers,
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    }))
}

pub async fn explain(State(st): State<AppState>, mp: Multipart) -> ApiResult<ExplainResponse> {
    let started = Instant::now();
    let mut form = Form::read(mp).await?;
    let task = Task::parse(form.fields.get("task").map(String::as_str).unwrap_or("classify"))?;
    let reg = registry(&st)?;
    let m = entry(&reg, task)?;
    let names = target_names(task);
    let target = match form.fields.get("target") {
        None => 0,
        Some(t) => match t.parse::<usize>() {
            Ok(i) => i,
            Err(_) => names
                .iter()
                .position(|n| n == t)
                .ok_or_else(|| ApiError::bad_request(format!("unknown target '{t}' (valid: {})", names.join(", "))))?,
        },
    };
    if target >= names.len() {
        return Err(ApiError::bad_request(format!("target index {target} out of range (valid: 0..{})", names.len())));
    }
    let alpha = form.number("alpha", form.number("overlay_alpha", 0.5)?)?;
    let cmap = Colormap::parse(form.fields.get("colormap").map(String::as_str).unwrap_or("jet"))?;
    let layer = form.fields.get("layer").cloned();
    let version = m.version.clone();
    let up = form.one_image()?;
    st.audit(&[(up.name.as_str(), up.bytes.as_slice())]);
    let id = up.name.clone();
    let reg2 = reg.clone();
    let (sal, png16, png) = blocking(&st, move || {
        let m = entry(&reg2, task)?;
        let (rgb, f) = prepare(&up, m.input_side)?;
        let sal = {
            let _guard = m.explain_lock.lock().unwrap_or_else(|p| p.into_inner());
            grad_cam(&m.model, &f, target, layer.as_deref())?
        };
        let png16 = sal.png16_bytes()?;
        let ov = overlay(&rgb, Layer::Saliency(&sal), alpha, cmap);
        Ok((sal, png16, png_bytes(&ov)?))
    })
    .await?;
    Ok(Json(ExplainResponse {
        task: task.name().into(),
        id,
        model_version: version,
        target: sal.target.clone(),
        target_index: target,
        layer: sal.layer.clone(),
        all_zero: sal.all_zero,
        side: sal.side,
        saliency: sal.grid,
        saliency_png16: b64(&png16),
        overlay_alpha: alpha.clamp(0.0, 1.0),
        overlay_png: b64(&png),
        latency_ms: started.elapsed().as_secs_f64() * 1e3,
    }))
}
