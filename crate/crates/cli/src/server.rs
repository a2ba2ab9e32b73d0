//! HTTP render service.
//!
//! `GET /api/meta`, `GET /api/render?c=..[&w=&h=]`, `GET /api/effect?c=..&axis=&radius=&n=`
//! and the viewer's static assets under `/`. Coordinates on the wire are
//! normalized; malformed queries get a 400 with `{"code", "message"}`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::Serialize;
use xfields::dataset::encode_png;
use xfields::render::{Model, RenderError};
use xfields::DimensionSpec;

/// Largest accepted output side and effect sample count.
pub const MAX_SIDE: usize = 4096;
pub const MAX_SAMPLES: usize = 256;

const INDEX_HTML: &str = r#"<!doctype html>
<html><head><meta charset="utf-8"><title>X-Field</title></head>
<body>
<p>No viewer bundle installed. Start the server with <code>--static DIR</code>
to serve one, or query the API directly:</p>
<ul><li><a href="/api/meta">/api/meta</a></li></ul>
</body></html>
"#;

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: SocketAddr, message: String },
    #[error("server error: {0}")]
    Io(String),
}

#[derive(Clone)]
struct AppState {
    model: Arc<Model>,
    static_dir: Option<Arc<PathBuf>>,
}

#[derive(Serialize)]
struct ErrorBody {
    code: &'static str,
    message: String,
}

/// A request failure rendered as a JSON body.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn bad(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            code,
            message: message.into(),
        }
    }
}

impl From<RenderError> for ApiError {
    fn from(e: RenderError) -> Self {
        let code = match e {
            RenderError::Arity { .. } | RenderError::NonFinite(_) => "bad_coordinate",
            RenderError::InvalidAxis { .. } => "bad_axis",
            RenderError::InvalidArgument(_) => "bad_parameter",
            _ => {
                return Self {
                    status: StatusCode::INTERNAL_SERVER_ERROR,
                    code: "render_failed",
                    message: e.to_string(),
                }
            }
        };
        Self::bad(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(ErrorBody {
                code: self.code,
                message: self.message,
            }),
        )
            .into_response()
    }
}

#[derive(Serialize)]
pub struct Resolution {
    pub width: usize,
    pub height: usize,
}

#[derive(Serialize)]
pub struct Meta {
    pub name: String,
    pub dims: Vec<DimensionSpec>,
    pub resolution: Resolution,
}

pub fn meta(model: &Model) -> Meta {
    let (height, width) = model.resolution();
    Meta {
        name: model.name.clone(),
        dims: model.dims().to_vec(),
        resolution: Resolution { width, height },
    }
}

/// `"0.5,0.25"` → `[0.5, 0.25]`.
pub fn parse_coord(raw: &str) -> Result<Vec<f64>, ApiError> {
    raw.split(',')
        .map(|s| {
            let s = s.trim();
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ApiError::bad("bad_coordinate", format!("`{s}` is not a finite number")))
        })
        .collect()
}

fn required<'a>(q: &'a HashMap<String, String>, key: &str) -> Result<&'a str, ApiError> {
    q.get(key)
        .map(String::as_str)
        .ok_or_else(|| ApiError::bad("missing_parameter", format!("missing `{key}`")))
}

fn number<T: std::str::FromStr>(q: &HashMap<String, String>, key: &str) -> Result<Option<T>, ApiError> {
    q.get(key)
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| ApiError::bad("bad_parameter", format!("`{key}={v}` is not a valid number")))
        })
        .transpose()
}

fn size(model: &Model, q: &HashMap<String, String>) -> Result<(usize, usize), ApiError> {
    let (h, w) = model.resolution();
    let width = number::<usize>(q, "w")?.unwrap_or(w);
    let height = number::<usize>(q, "h")?.unwrap_or(h);
    if width == 0 || height == 0 || width > MAX_SIDE || height > MAX_SIDE {
        return Err(ApiError::bad(
            "bad_parameter",
            format!("size {width}x{height} outside 1..={MAX_SIDE}"),
        ));
    }
    Ok((width, height))
}

/// Axis by index or by dimension name.
fn axis(model: &Model, raw: &str) -> Result<usize, ApiError> {
    if let Ok(i) = raw.parse::<usize>() {
        return Ok(i);
    }
    model
        .dims()
        .iter()
        .position(|d| d.name == raw)
        .ok_or_else(|| ApiError::bad("bad_axis", format!("unknown axis `{raw}`")))
}

fn png(image: &xfields::Tensor<f32>) -> Result<Response, ApiError> {
    let bytes = encode_png(image).map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        code: "encode_failed",
        message: e.to_string(),
    })?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn blocking<F>(f: F) -> Result<Response, ApiError>
where
    F: FnOnce() -> Result<Response, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        code: "render_failed",
        message: e.to_string(),
    })?
}

async fn meta_handler(State(s): State<AppState>) -> Json<Meta> {
    Json(meta(&s.model))
}

async fn render_handler(
    State(s): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Response, ApiError> {
    let coord = parse_coord(required(&q, "c")?)?;
    let (w, h) = size(&s.model, &q)?;
    let model = s.model.clone();
    blocking(move || png(&model.render_frame(&coord, w, h)?)).await
}

async fn effect_handler(
    State(s): State<AppState>,
    Query(q): Query<HashMap<String, String>>,
) -> Result<Response, ApiError> {
    let coord = parse_coord(required(&q, "c")?)?;
    let axis = axis(&s.model, required(&q, "axis")?)?;
    let radius: f64 = number(&q, "radius")?.unwrap_or(0.0);
    let n: usize = number(&q, "n")?.unwrap_or(8);
    if n > MAX_SAMPLES {
        return Err(ApiError::bad("bad_parameter", format!("n = {n} exceeds {MAX_SAMPLES}")));
    }
    let (w, h) = size(&s.model, &q)?;
    let model = s.model.clone();
    blocking(move || png(&model.render_effect(&coord, axis, radius, n, w, h)?)).await
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        Some("wasm") => "application/wasm",
        _ => "application/octet-stream",
    }
}

async fn static_handler(State(s): State<AppState>, uri: axum::http::Uri) -> Response {
    let Some(dir) = s.static_dir else {
        return if uri.path() == "/" {
            Html(INDEX_HTML).into_response()
        } else {
            StatusCode::NOT_FOUND.into_response()
        };
    };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    let rel = Path::new(rel);
    if rel.components().any(|c| !matches!(c, Component::Normal(_))) {
        return StatusCode::NOT_FOUND.into_response();
    }
    let path = dir.join(rel);
    match tokio::fs::read(&path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response(),
        Err(_) => StatusCode::NOT_FOUND.into_response(),
    }
}

pub fn router(model: Arc<Model>, static_dir: Option<PathBuf>) -> Router {
    let state = AppState {
        model,
        static_dir: static_dir.map(Arc::new),
    };
    Router::new()
        .route("/api/meta", get(meta_handler))
        .route("/api/render", get(render_handler))
        .route("/api/effect", get(effect_handler))
        .fallback(get(static_handler))
        .with_state(state)
}

/// Binds `addr` and serves until the process exits.
pub async fn serve(model: Arc<Model>, addr: SocketAddr, static_dir: Option<PathBuf>) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| ServeError::Bind {
            addr,
            message: e.to_string(),
        })?;
    eprintln!("serving {} on http://{}", model.name, listener.local_addr().map_err(|e| ServeError::Io(e.to_string()))?);
    axum::serve(listener, router(model, static_dir))
        .await
        .map_err(|e| ServeError::Io(e.to_string()))
}
