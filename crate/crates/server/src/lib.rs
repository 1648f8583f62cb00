//! HTTP/JSON service over loaded projects.
//!
//! All endpoints are read-only. Heatmaps are rendered here and cached per
//! (project, sample, mode, colormap), so repeated requests return identical bytes.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::middleware::Next;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use base64::engine::general_purpose::{URL_SAFE, URL_SAFE_NO_PAD};
use base64::Engine as _;
use serde_json::{json, Value};

use relvis_core::attribution::{render_heatmap, render_input, Colormap, HeatmapMode};
use relvis_core::png::encode_png;
use relvis_core::store::{decode_selection, encode_selection, CategoryAnalysis, ProjectBundle};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("server failed: {0}")]
    Io(#[from] std::io::Error),
}

type RenderKey = (usize, usize, &'static str, &'static str);

pub struct ApiState {
    projects: Vec<ProjectBundle>,
    renders: RwLock<HashMap<RenderKey, Bytes>>,
}

impl ApiState {
    pub fn new(projects: Vec<ProjectBundle>) -> Self {
        ApiState {
            projects,
            renders: RwLock::new(HashMap::new()),
        }
    }

    pub fn cached_renders(&self) -> usize {
        self.renders.read().unwrap().len()
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn not_found(what: impl Into<String>) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, what.into())
}

fn bad_request(what: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, what.into())
}

type ApiResult<T> = Result<T, ApiError>;

fn project<'a>(state: &'a ApiState, id: &str) -> ApiResult<&'a ProjectBundle> {
    id.parse::<usize>()
        .ok()
        .and_then(|i| state.projects.get(i))
        .ok_or_else(|| not_found(format!("no project `{id}`")))
}

fn param<'a>(q: &'a HashMap<String, String>, name: &str) -> ApiResult<&'a str> {
    q.get(name)
        .map(String::as_str)
        .ok_or_else(|| bad_request(format!("missing query parameter `{name}`")))
}

fn category(p: &ProjectBundle, q: &HashMap<String, String>) -> ApiResult<CategoryAnalysis> {
    let analysis = param(q, "analysis")?;
    let category = param(q, "category")?;
    let a = p
        .analysis(analysis)
        .ok_or_else(|| not_found(format!("no analysis `{analysis}`")))?;
    a.category(category)
        .map_err(|_| not_found(format!("no category `{category}` in `{analysis}`")))
}

/// Orders `kmeans-2` before `kmeans-10`.
fn natural_key(s: &str) -> (String, u64, String) {
    let digits = s.len() - s.trim_end_matches(|c: char| c.is_ascii_digit()).len();
    let (head, tail) = s.split_at(s.len() - digits);
    (head.to_string(), tail.parse().unwrap_or(0), s.to_string())
}

fn sorted_names<'a>(names: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut v: Vec<String> = names.cloned().collect();
    v.sort_by_key(|s| natural_key(s));
    v.dedup();
    v
}

async fn list_projects(State(state): State<Arc<ApiState>>) -> Json<Value> {
    let list: Vec<Value> = state
        .projects
        .iter()
        .enumerate()
        .map(|(id, p)| {
            json!({
                "id": id,
                "project_name": p.manifest.project_name,
                "model_name": p.manifest.model_name,
                "dataset_name": p.manifest.dataset.name,
            })
        })
        .collect();
    Json(Value::Array(list))
}

async fn project_detail(
    State(state): State<Arc<ApiState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Value>> {
    let p = project(&state, &id)?;
    let analyses: Vec<&str> = p.analyses.iter().map(|a| a.method.as_str()).collect();
    let categories = p.categories(None);
    let mut clusterings = Vec::new();
    let mut embeddings = Vec::new();
    if let (Some(a), Some(c)) = (p.analyses.first(), categories.first()) {
        if let Ok(cat) = a.category(c) {
            clusterings = sorted_names(cat.clusterings.keys());
            embeddings = sorted_names(cat.embeddings.keys());
        }
    }
    Ok(Json(json!({
        "analyses": analyses,
        "categories": categories,
        "clusterings": clusterings,
        "embeddings": embeddings,
        "colormaps": Colormap::NAMES,
        "modes": relvis_core::store::selection::MODES,
    })))
}

async fn embedding(
    State(state): State<Arc<ApiState>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let p = project(&state, &id)?;
    let method = param(&q, "method")?;
    let cat = category(p, &q)?;
    let e = cat
        .embeddings
        .get(method)
        .ok_or_else(|| not_found(format!("no embedding `{method}`")))?;
    let (n, d) = (e.data.shape()[0], e.data.shape()[1]);
    let v = e.data.to_f64_vec();
    let points: Vec<[f64; 2]> = (0..n)
        .map(|i| [v[i * d], if d > 1 { v[i * d + 1] } else { 0.0 }])
        .collect();
    let mut body = json!({ "points": points, "indices": cat.index });
    if let Some(ev) = &e.eigenvalues {
        body["eigenvalues"] = json!(ev);
    }
    Ok(Json(body))
}

async fn clustering(
    State(state): State<Arc<ApiState>>,
    Path(id): Path<String>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Json<Value>> {
    let p = project(&state, &id)?;
    let name = param(&q, "name")?;
    let cat = category(p, &q)?;
    let c = cat
        .clusterings
        .get(name)
        .ok_or_else(|| not_found(format!("no clustering `{name}`")))?;
    let mut sizes: BTreeMap<i64, usize> = BTreeMap::new();
    for &l in &c.labels {
        *sizes.entry(l).or_default() += 1;
    }
    let sizes: serde_json::Map<String, Value> =
        sizes.into_iter().map(|(l, n)| (l.to_string(), json!(n))).collect();
    Ok(Json(json!({ "labels": c.labels, "cluster_sizes": sizes })))
}

fn png_response(bytes: Bytes) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn sample_image(
    State(state): State<Arc<ApiState>>,
    Path((id, index)): Path<(String, String)>,
    Query(q): Query<HashMap<String, String>>,
) -> ApiResult<Response> {
    let pid: usize = id.parse().map_err(|_| not_found(format!("no project `{id}`")))?;
    let p = project(&state, &id)?;
    let mode: &'static str = match q.get("mode").map(String::as_str).unwrap_or("attribution") {
        "input" => "input",
        "attribution" => "attribution",
        "overlay" => "overlay",
        other => return Err(bad_request(format!("unknown mode `{other}`"))),
    };
    let cmap = Colormap::parse(q.get("colormap").map(String::as_str).unwrap_or("coldnhot"))
        .map_err(|e| bad_request(e.to_string()))?;
    let index: usize = index
        .parse()
        .ok()
        .filter(|&i| i < p.dataset.len())
        .ok_or_else(|| not_found(format!("no sample `{index}`")))?;
    let key = (pid, index, mode, if mode == "input" { "" } else { cmap.name() });
    if let Some(b) = state.renders.read().unwrap().get(&key) {
        return Ok(png_response(b.clone()));
    }
    let internal = |e: &dyn std::fmt::Display| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    let sample = p.dataset.sample(index).map_err(|e| internal(&e))?;
    let image = match mode {
        "input" => render_input(&sample),
        _ => {
            let rel = p.attribution.sample(index).map_err(|e| internal(&e))?;
            if mode == "overlay" {
                render_heatmap(&rel, cmap, HeatmapMode::Overlay, Some(&sample))
            } else {
                render_heatmap(&rel, cmap, HeatmapMode::Attribution, None)
            }
        }
    }
    .map_err(|e| internal(&e))?;
    let bytes = Bytes::from(encode_png(&image));
    state.renders.write().unwrap().entry(key).or_insert_with(|| bytes.clone());
    Ok(png_response(bytes))
}

fn canonical_state(bytes: &[u8]) -> ApiResult<Response> {
    let doc = decode_selection(bytes).map_err(|e| bad_request(e.to_string()))?;
    let canon = encode_selection(&doc).map_err(|e| bad_request(e.to_string()))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], canon).into_response())
}

async fn get_state(Query(q): Query<HashMap<String, String>>) -> ApiResult<Response> {
    let d = param(&q, "d")?;
    let bytes = URL_SAFE_NO_PAD
        .decode(d.trim_end_matches('='))
        .or_else(|_| URL_SAFE.decode(d))
        .map_err(|e| bad_request(format!("state is not base64url: {e}")))?;
    canonical_state(&bytes)
}

async fn post_state(body: Bytes) -> ApiResult<Response> {
    canonical_state(&body)
}

fn allow_all_origins(mut resp: Response) -> Response {
    let h = resp.headers_mut();
    h.insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    h.insert(header::ACCESS_CONTROL_ALLOW_METHODS, HeaderValue::from_static("GET, POST, OPTIONS"));
    h.insert(header::ACCESS_CONTROL_ALLOW_HEADERS, HeaderValue::from_static("content-type"));
    resp
}

/// Answers preflight requests itself and marks every other response cross-origin.
async fn cors_layer(req: Request, next: Next) -> Response {
    if req.method() == Method::OPTIONS {
        return allow_all_origins(StatusCode::NO_CONTENT.into_response());
    }
    allow_all_origins(next.run(req).await)
}

/// The `share` payload for a selection: base64url of its canonical JSON, unpadded.
pub fn encode_state_param(canonical: &[u8]) -> String {
    URL_SAFE_NO_PAD.encode(canonical)
}

pub fn router(state: Arc<ApiState>, cors: bool) -> Router {
    let app = Router::new()
        .route("/api/projects", get(list_projects))
        .route("/api/projects/{id}", get(project_detail))
        .route("/api/projects/{id}/embedding", get(embedding))
        .route("/api/projects/{id}/clustering", get(clustering))
        .route("/api/projects/{id}/sample/{index}/image", get(sample_image))
        .route("/api/state", get(get_state).post(post_state))
        .with_state(state);
    if cors {
        app.layer(axum::middleware::from_fn(cors_layer))
    } else {
        app
    }
}

/// Binds synchronously so a busy port is reported before anything starts.
pub fn bind(host: &str, port: u16) -> Result<std::net::TcpListener, ServerError> {
    let addr = format!("{host}:{port}");
    let listener = std::net::TcpListener::bind(&addr).map_err(|source| ServerError::Bind {
        addr: addr.clone(),
        source,
    })?;
    listener.set_nonblocking(true)?;
    Ok(listener)
}

/// Serves until interrupted (Ctrl-C).
pub fn serve_blocking(
    listener: std::net::TcpListener,
    projects: Vec<ProjectBundle>,
    cors: bool,
) -> Result<(), ServerError> {
    let addr: SocketAddr = listener.local_addr()?;
    let app = router(Arc::new(ApiState::new(projects)), cors);
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        log::info!("serving on http://{addr}");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}
