//! JSON-over-HTTP inference over one immutable [`ModelBundle`].
//!
//! Images travel as base64 PNG. Every handler runs the model on the blocking
//! pool; the bundle is shared read-only, so requests never affect each other.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

use itgan_core::data::RawImage;
use itgan_core::nn::ModelBundle;
use itgan_core::pipeline::{self, Edit, EditValue};
use itgan_core::{Error, Tensor};

/// Base64 PNG with its declared geometry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiImage {
    pub data: String,
    pub width: usize,
    pub height: usize,
}

impl ApiImage {
    pub fn from_raw(img: &RawImage) -> Result<Self, ApiError> {
        Ok(ApiImage {
            data: B64.encode(pipeline::encode_png(img).map_err(ApiError::internal)?),
            width: img.width,
            height: img.height,
        })
    }

    pub fn from_tensor(x: &Tensor<f32>) -> Result<Self, ApiError> {
        Self::from_raw(&pipeline::tensor_to_raw(x).map_err(ApiError::internal)?)
    }

    /// Decodes the PNG and checks it against the declared size.
    pub fn decode(&self) -> Result<RawImage, ApiError> {
        let bytes = B64
            .decode(self.data.trim())
            .map_err(|e| ApiError::bad_request(format!("image is not valid base64: {e}")))?;
        let raw = RawImage::decode(&bytes).map_err(|e| ApiError::bad_request(e.to_string()))?;
        if (raw.width, raw.height) != (self.width, self.height) {
            return Err(ApiError::bad_request(format!(
                "image decodes to {}x{}, declared {}x{}",
                raw.width, raw.height, self.width, self.height
            )));
        }
        Ok(raw)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, detail: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: error.into(),
                detail: detail.into(),
            },
        }
    }

    pub fn bad_request(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", detail)
    }

    pub fn unprocessable(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unprocessable_image", detail)
    }

    pub fn no_model() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "no_model", "no model is loaded")
    }

    pub fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::UnknownAttribute { .. } => Self::new(StatusCode::BAD_REQUEST, "unknown_attribute", e.to_string()),
            Error::Argument(_) => Self::bad_request(e.to_string()),
            Error::Dimension(_) => Self::unprocessable(e.to_string()),
            Error::Image(_) => Self::bad_request(e.to_string()),
            other => Self::internal(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_loaded: bool,
    pub image_size: Option<usize>,
    pub attribute_count: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeInfo {
    pub name: String,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodeRequest {
    pub image: ApiImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodeResponse {
    pub z_tilde: Vec<f32>,
    pub c_tilde: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub c: Vec<f64>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub image: ApiImage,
    pub seed: u64,
}

/// `0`, `1` or `"flip"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EditSpec {
    Value(u8),
    Word(String),
}

impl EditSpec {
    fn to_value(&self, name: &str) -> Result<EditValue, ApiError> {
        match self {
            EditSpec::Value(0) => Ok(EditValue::Set(false)),
            EditSpec::Value(1) => Ok(EditValue::Set(true)),
            EditSpec::Word(w) if w == "flip" => Ok(EditValue::Flip),
            other => Err(ApiError::bad_request(format!(
                "edit for `{name}` must be 0, 1 or \"flip\", got {}",
                serde_json::to_string(other).unwrap_or_default()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformRequest {
    pub image: ApiImage,
    #[serde(default)]
    pub edits: BTreeMap<String, EditSpec>,
    #[serde(default = "yes")]
    pub return_identity_score: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformResponse {
    pub image: ApiImage,
    pub c_tilde: Vec<f32>,
    pub c_edited: Vec<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub identity_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Clone, Default)]
pub struct AppState {
    bundle: Option<Arc<ModelBundle>>,
}

impl AppState {
    pub fn new(bundle: Option<ModelBundle>) -> Self {
        AppState {
            bundle: bundle.map(Arc::new),
        }
    }

    fn model(&self) -> Result<Arc<ModelBundle>, ApiError> {
        self.bundle.clone().ok_or_else(ApiError::no_model)
    }
}

/// Origins allowed to call the API from a browser; `None` allows any.
#[derive(Clone, Debug, Default)]
pub struct CorsOrigins(pub Option<Vec<String>>);

fn cors(origins: &CorsOrigins) -> CorsLayer {
    let allow = match &origins.0 {
        None => AllowOrigin::from(Any),
        Some(list) => AllowOrigin::list(list.iter().filter_map(|o| HeaderValue::from_str(o).ok())),
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE])
}

pub fn router(state: AppState, origins: &CorsOrigins) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/attributes", get(attributes))
        .route("/encode", post(encode))
        .route("/generate", post(generate))
        .route("/transform", post(transform))
        .layer(cors(origins))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(bundle: Option<ModelBundle>, addr: SocketAddr, origins: CorsOrigins) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(bundle), &origins))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// JSON parse failures become `{error, detail}` like every other error.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

fn prepare(bundle: &ModelBundle, image: &ApiImage) -> Result<Tensor<f32>, ApiError> {
    let raw = image.decode()?;
    let s = bundle.image_size();
    itgan_core::data::preprocess(&raw, s, s).map_err(|e| ApiError::unprocessable(e.to_string()))
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    let b = state.bundle.as_deref();
    Json(Health {
        status: "ok".into(),
        model_loaded: b.is_some(),
        image_size: b.map(|b| b.image_size()),
        attribute_count: b.map(|b| b.arch.attr_count),
    })
}

async fn attributes(State(state): State<AppState>) -> ApiResult<Vec<AttributeInfo>> {
    let b = state.model()?;
    Ok(Json(
        b.attributes
            .iter()
            .enumerate()
            .map(|(index, name)| AttributeInfo {
                name: name.clone(),
                index,
            })
            .collect(),
    ))
}

async fn encode(State(state): State<AppState>, body: Bytes) -> ApiResult<EncodeResponse> {
    let b = state.model()?;
    let req: EncodeRequest = parse(&body)?;
    blocking(move || {
        let x = prepare(&b, &req.image)?;
        let (z_tilde, c_tilde) = pipeline::encode_image(&b, &x)?;
        Ok(Json(EncodeResponse { z_tilde, c_tilde }))
    })
    .await
}

async fn generate(State(state): State<AppState>, body: Bytes) -> ApiResult<GenerateResponse> {
    let b = state.model()?;
    let req: GenerateRequest = parse(&body)?;
    if req.c.len() != b.arch.attr_count {
        return Err(ApiError::bad_request(format!(
            "c has {} entries, the model has {} attributes",
            req.c.len(),
            b.arch.attr_count
        )));
    }
    if let Some(v) = req.c.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(ApiError::bad_request(format!("c entries must be 0 or 1, got {v}")));
    }
    let seed = req.seed.unwrap_or_else(rand::random);
    blocking(move || {
        let c: Vec<f32> = req.c.iter().map(|&v| v as f32).collect();
        let img = pipeline::generate(&b, &c, 1, seed)?;
        Ok(Json(GenerateResponse {
            image: ApiImage::from_tensor(&img)?,
            seed,
        }))
    })
    .await
}

async fn transform(State(state): State<AppState>, body: Bytes) -> ApiResult<TransformResponse> {
    let b = state.model()?;
    let req: TransformRequest = parse(&body)?;
    let edits = req
        .edits
        .iter()
        .map(|(name, spec)| {
            b.attribute_index(name)?;
            Ok(Edit {
                name: name.clone(),
                value: spec.to_value(name)?,
            })
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    blocking(move || {
        let x = prepare(&b, &req.image)?;
        let t = pipeline::transform(&b, &x, &edits)?;
        Ok(Json(TransformResponse {
            image: ApiImage::from_tensor(&t.image)?,
            c_tilde: t.c_tilde,
            c_edited: t.c_edited,
            identity_score: req.return_identity_score.then_some(t.identity_score),
            warning: t.warning,
        }))
    })
    .await
}
