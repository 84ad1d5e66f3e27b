//! JSON-over-HTTP inference service. Images travel as base64 PNG.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use clap::Args;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;
use transpace::codes::{compose_directions, DirectionDocument, LatentCode, TransformationCode, TransformationDirection};
use transpace::image::Image;
use transpace::nn::fnv1a;
use transpace::transform::{check_document_stage, codes_for_seed, extract_transformation, transform_sequence};

use crate::Model;

const INDEX_HTML: &str = include_str!("../assets/index.html");

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// TOML file with `ckpt`, `host`, `port`, `ui_dir`, `registry` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub host: Option<String>,
    #[arg(long)]
    pub port: Option<u16>,
    /// Serve a built UI from this folder under /ui.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// JSON file the direction registry is loaded from and saved to.
    #[arg(long)]
    pub registry: Option<PathBuf>,
    /// Accepted for uniformity; requests carry their own seeds.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    pub ckpt: Option<PathBuf>,
    pub host: Option<String>,
    pub port: Option<u16>,
    pub ui_dir: Option<PathBuf>,
    pub registry: Option<PathBuf>,
}

/// Loaded model plus the stored directions.
pub struct AppState {
    model: Model,
    registry: RwLock<BTreeMap<String, DirectionDocument>>,
    registry_path: Option<PathBuf>,
}

impl AppState {
    pub fn new(model: Model, registry_path: Option<PathBuf>) -> Result<Self> {
        let registry = match &registry_path {
            Some(p) if p.exists() => {
                let text = std::fs::read_to_string(p).map_err(|e| transpace::Error::io(p, e))?;
                serde_json::from_str(&text).with_context(|| format!("registry {}", p.display()))?
            }
            _ => BTreeMap::new(),
        };
        Ok(Self {
            model,
            registry: RwLock::new(registry),
            registry_path,
        })
    }

    /// Stores `doc` under an id derived from its content.
    fn register(&self, doc: DirectionDocument) -> std::result::Result<String, ApiError> {
        let key = serde_json::to_string(&(&doc.layer_mask, &doc.delta)).map_err(ApiError::internal)?;
        let id = format!("d{:016x}", fnv1a(key.as_bytes()));
        let mut reg = self.registry.write().expect("registry lock");
        reg.entry(id.clone()).or_insert(doc);
        if let Some(path) = &self.registry_path {
            let text = serde_json::to_string_pretty(&*reg).map_err(ApiError::internal)?;
            std::fs::write(path, text).map_err(ApiError::internal)?;
        }
        Ok(id)
    }

    fn lookup(&self, id: &str) -> std::result::Result<DirectionDocument, ApiError> {
        self.registry
            .read()
            .expect("registry lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown direction_id {id}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            message: message.into(),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: e.to_string(),
        }
    }
}

impl From<transpace::Error> for ApiError {
    fn from(e: transpace::Error) -> Self {
        use transpace::Error as E;
        match e {
            E::InvalidArgument(_) | E::ShapeMismatch(_) | E::StageMismatch { .. } | E::Version { .. } | E::Image(_) | E::Json(_) => {
                Self::bad(e.to_string())
            }
            E::NotFound(_) => Self::not_found(e.to_string()),
            other => Self::internal(other),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

/// Parses a JSON body; serde's message names the offending field.
fn parse<T: DeserializeOwned>(body: &Bytes) -> std::result::Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad(format!("malformed body: {e}")))
}

fn decode_image(field: &str, data: &str, size: usize) -> std::result::Result<Image, ApiError> {
    let bytes = B64
        .decode(data.trim())
        .map_err(|e| ApiError::bad(format!("{field}: invalid base64: {e}")))?;
    Image::from_encoded(&bytes, size).map_err(|e| ApiError::bad(format!("{field}: {e}")))
}

fn encode_image(img: &Image) -> std::result::Result<String, ApiError> {
    Ok(B64.encode(img.to_png_bytes()?))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> std::result::Result<T, ApiError> + Send + 'static,
) -> std::result::Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectRequest {
    image: String,
}

#[derive(Serialize, Deserialize)]
pub struct ProjectResponse {
    pub code: Vec<Vec<f32>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateRequest {
    seed: Option<u64>,
    z: Option<Vec<Vec<f32>>>,
    t: Option<Vec<Vec<f32>>>,
}

#[derive(Serialize, Deserialize)]
pub struct ImageResponse {
    pub image: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtractRequest {
    image_a: String,
    image_b: String,
}

#[derive(Serialize, Deserialize)]
pub struct DirectionResponse {
    pub direction_id: String,
    pub direction: DirectionDocument,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ApplyRequest {
    seed: u64,
    direction_id: Option<String>,
    direction: Option<DirectionDocument>,
    gammas: Vec<f64>,
    layers: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
pub struct ImagesResponse {
    pub images: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ComposeRequest {
    direction_ids: Vec<String>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub checkpoint_hash: String,
    pub stage: usize,
}

async fn health(State(s): State<Arc<AppState>>) -> Json<HealthResponse> {
    Json(HealthResponse {
        status: "ok".into(),
        checkpoint_hash: s.model.hash.clone(),
        stage: s.model.stage,
    })
}

async fn project(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<ProjectResponse> {
    let req: ProjectRequest = parse(&body)?;
    blocking(move || {
        let img = decode_image("image", &req.image, s.model.d.resolution())?;
        let code = s.model.d.project(&img)?;
        Ok(Json(ProjectResponse {
            code: code.layers().to_vec(),
        }))
    })
    .await
}

async fn generate(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<ImageResponse> {
    let req: GenerateRequest = parse(&body)?;
    blocking(move || {
        let arch = s.model.g.arch();
        let (z, t) = match (req.seed, req.z, req.t) {
            (Some(seed), None, t) => {
                let (z, base_t) = codes_for_seed(arch, seed)?;
                let t = match t {
                    Some(t) => TransformationCode::new(t).map_err(|e| ApiError::bad(format!("t: {e}")))?,
                    None => base_t,
                };
                (z, t)
            }
            (None, Some(z), Some(t)) => (
                LatentCode::new(z).map_err(|e| ApiError::bad(format!("z: {e}")))?,
                TransformationCode::new(t).map_err(|e| ApiError::bad(format!("t: {e}")))?,
            ),
            (Some(_), Some(_), _) => return Err(ApiError::bad("give either seed or z, not both")),
            _ => return Err(ApiError::bad("missing field: seed, or both z and t")),
        };
        let img = s.model.g.generate(&z, &t)?;
        Ok(Json(ImageResponse {
            image: encode_image(&img)?,
        }))
    })
    .await
}

async fn extract(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<DirectionResponse> {
    let req: ExtractRequest = parse(&body)?;
    blocking(move || {
        let res = s.model.d.resolution();
        let a = decode_image("image_a", &req.image_a, res)?;
        let b = decode_image("image_b", &req.image_b, res)?;
        let mut r = extract_transformation(&s.model.d, &a, &b)?;
        r.source_a = "image_a".into();
        r.source_b = "image_b".into();
        r.checkpoint_hash = s.model.hash.clone();
        let doc = r.to_document();
        let direction_id = s.register(doc.clone())?;
        Ok(Json(DirectionResponse {
            direction_id,
            direction: doc,
        }))
    })
    .await
}

async fn apply(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<ImagesResponse> {
    let req: ApplyRequest = parse(&body)?;
    blocking(move || {
        let doc = match (req.direction_id, req.direction) {
            (Some(id), None) => s.lookup(&id)?,
            (None, Some(doc)) => doc,
            (Some(_), Some(_)) => return Err(ApiError::bad("give either direction_id or direction, not both")),
            (None, None) => return Err(ApiError::bad("missing field: direction_id or direction")),
        };
        check_document_stage(&doc, s.model.stage)?;
        let mut dir = TransformationDirection::from_document(&doc).map_err(|e| ApiError::bad(format!("direction: {e}")))?;
        if let Some(layers) = &req.layers {
            dir = dir.masked(layers).map_err(|e| ApiError::bad(format!("layers: {e}")))?;
        }
        if req.gammas.is_empty() {
            return Err(ApiError::bad("gammas: must not be empty"));
        }
        let (z, t) = codes_for_seed(s.model.g.arch(), req.seed)?;
        let images = transform_sequence(&s.model.g, &z, &t, &dir, &req.gammas)?
            .iter()
            .map(encode_image)
            .collect::<std::result::Result<_, _>>()?;
        Ok(Json(ImagesResponse { images }))
    })
    .await
}

async fn compose(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<DirectionResponse> {
    let req: ComposeRequest = parse(&body)?;
    let docs = req
        .direction_ids
        .iter()
        .map(|id| s.lookup(id))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    for doc in &docs {
        check_document_stage(doc, s.model.stage)?;
    }
    let dirs = docs
        .iter()
        .map(TransformationDirection::from_document)
        .collect::<transpace::Result<Vec<_>>>()?;
    let composed = compose_directions(&dirs, &req.weights)?;
    let doc = composed.to_document();
    let direction_id = s.register(doc.clone())?;
    Ok(Json(DirectionResponse {
        direction_id,
        direction: doc,
    }))
}

async fn ui_index() -> impl IntoResponse {
    ([(header::CACHE_CONTROL, "no-cache")], Html(INDEX_HTML))
}

/// All routes over a shared state.
pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/project", post(project))
        .route("/generate", post(generate))
        .route("/extract", post(extract))
        .route("/apply", post(apply))
        .route("/compose", post(compose))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.nest_service("/ui", ServeDir::new(dir)),
        None => api.route("/ui", get(ui_index)).route("/ui/", get(ui_index)),
    }
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let file = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| transpace::Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| transpace::Error::Config(e.to_string()))?
        }
        None => ServeConfig::default(),
    };
    let ckpt = a
        .ckpt
        .or(file.ckpt)
        .ok_or_else(|| transpace::Error::Config("no checkpoint configured (--ckpt or config `ckpt`)".into()))?;
    let host = a.host.or(file.host).unwrap_or_else(|| "127.0.0.1".into());
    let port = a.port.or(file.port).unwrap_or(8080);
    let ui_dir = a.ui_dir.or(file.ui_dir);
    let state = Arc::new(AppState::new(Model::load(&ckpt)?, a.registry.or(file.registry))?);
    let app = router(state, ui_dir.as_deref());
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| transpace::Error::Config(format!("bad address {host}:{port}: {e}")))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        println!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
