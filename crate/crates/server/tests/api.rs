use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt as _;
use serde_json::{json, Value};
use tower::ServiceExt as _;

use relvis_core::spray::{analyze_category, AnalysisParams};
use relvis_core::store::{
    open_project, AnalysisRef, AnalysisStore, AttributionRef, AttributionStore, DatasetRef, DatasetStore, LabelMap,
    Labels, ProjectBundle, ProjectManifest, Strategy,
};
use relvis_core::Tensor;
use relvis_server::{encode_state_param, router, ApiState};

const PER_CLASS: usize = 10;
const CLASSES: [&str; 3] = ["circle", "square", "triangle"];

fn labels() -> Vec<i64> {
    (0..PER_CLASS * 3).map(|i| (i % 3) as i64).collect()
}

/// Writes a small project (30 samples, 8x8, one analysis) and returns its manifest path.
fn fixture(dir: &Path) -> std::path::PathBuf {
    let n = PER_CLASS * 3;
    let data: Vec<u8> = (0..n * 64).map(|i| ((i * 37) % 251) as u8).collect();
    let data = Tensor::from_u8(&[n, 1, 8, 8], data).unwrap();
    DatasetStore::write(&dir.join("data"), &data, &Labels::Single(labels()), &[]).unwrap();
    LabelMap::from_names(&CLASSES).save(&dir.join("label-map.json")).unwrap();

    let attr: Vec<f32> = (0..n * 64).map(|i| ((i as f32) * 0.71).sin() * (1 + i % 5) as f32).collect();
    let pred: Vec<f32> = (0..n * 3).map(|i| (i % 3) as f32).collect();
    let attr = AttributionStore::new(
        Tensor::from_f32(&[n, 1, 8, 8], attr).unwrap(),
        Labels::Single(labels()),
        Tensor::from_f32(&[n, 3], pred).unwrap(),
    )
    .unwrap();
    attr.write(&dir.join("attr")).unwrap();

    let params = AnalysisParams {
        knn_k: 3,
        n_eigval: 4,
        kmeans_range: 2..=10,
        tsne_perplexity: 2.0,
        tsne_iters: 50,
        ..Default::default()
    };
    let mut store = AnalysisStore::create(&dir.join("analysis")).unwrap();
    for (c, name) in CLASSES.iter().enumerate() {
        let index: Vec<usize> = (0..n).filter(|i| i % 3 == c).collect();
        let rows = attr.attribution.gather_rows(&index).unwrap();
        let (a, _) = analyze_category(&rows, index, &params, None).unwrap();
        store.write_category("spray", name, &a).unwrap();
    }

    let manifest = ProjectManifest {
        project_name: "fixture".into(),
        model_name: "none".into(),
        dataset: DatasetRef {
            name: "patterns".into(),
            kind: "vzstore".into(),
            path: "data".into(),
            input_width: 8,
            input_height: 8,
            up_sampling: "nearest".into(),
            down_sampling: "nearest".into(),
            label_map_path: "label-map.json".into(),
        },
        attributions: AttributionRef {
            method: "epsilon".into(),
            strategy: Strategy::TrueLabel,
            sources: vec!["attr".into()],
        },
        analyses: vec![AnalysisRef {
            method: "spray".into(),
            sources: vec!["analysis".into()],
        }],
    };
    let path = dir.join("project.json");
    manifest.save(&path).unwrap();
    path
}

struct Harness {
    _dir: tempfile::TempDir,
    state: Arc<ApiState>,
    app: Router,
}

fn harness(copies: usize, cors: bool) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path());
    let projects: Vec<ProjectBundle> = (0..copies).map(|_| open_project(&manifest).unwrap()).collect();
    let state = Arc::new(ApiState::new(projects));
    let app = router(state.clone(), cors);
    Harness { _dir: dir, state, app }
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    body: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.body).unwrap_or_else(|e| panic!("{e}: {:?}", String::from_utf8_lossy(&self.body)))
    }
}

async fn send(app: &Router, method: Method, uri: &str, body: Vec<u8>) -> Reply {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, body }
}

async fn get(app: &Router, uri: &str) -> Reply {
    send(app, Method::GET, uri, Vec::new()).await
}

#[tokio::test]
async fn lists_projects_in_order() {
    let h = harness(2, false);
    let r = get(&h.app, "/api/projects").await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.headers[header::CONTENT_TYPE], "application/json");
    let list = r.json();
    assert_eq!(list.as_array().unwrap().len(), 2);
    assert_eq!(list[0], json!({"id": 0, "project_name": "fixture", "model_name": "none", "dataset_name": "patterns"}));
    assert_eq!(list[1]["id"], 1);
}

#[tokio::test]
async fn project_detail_and_unknown_id() {
    let h = harness(1, false);
    let d = get(&h.app, "/api/projects/0").await.json();
    assert_eq!(d["analyses"], json!(["spray"]));
    assert_eq!(d["categories"], json!(CLASSES));
    assert_eq!(d["embeddings"], json!(["spectral", "tsne"]));
    let clusterings: Vec<String> = (2..=10).map(|k| format!("kmeans-{k}")).collect();
    assert_eq!(d["clusterings"], json!(clusterings));
    assert_eq!(d["modes"], json!(["input", "attribution", "overlay"]));
    assert!(d["colormaps"].as_array().unwrap().contains(&json!("coldnhot")));

    for uri in ["/api/projects/9", "/api/projects/x"] {
        let r = get(&h.app, uri).await;
        assert_eq!(r.status, StatusCode::NOT_FOUND);
        assert!(r.json()["error"].is_string());
    }
}

#[tokio::test]
async fn embeddings_align_with_dataset_indices() {
    let h = harness(1, false);
    let base = "/api/projects/0/embedding?analysis=spray&category=square";
    let s = get(&h.app, &format!("{base}&method=spectral")).await.json();
    let indices: Vec<usize> = serde_json::from_value(s["indices"].clone()).unwrap();
    assert_eq!(indices.len(), PER_CLASS);
    assert!(indices.iter().all(|&i| labels()[i] == 1));
    assert_eq!(s["points"].as_array().unwrap().len(), PER_CLASS);
    assert_eq!(s["eigenvalues"].as_array().unwrap().len(), 4);

    let t = get(&h.app, &format!("{base}&method=tsne")).await.json();
    assert_eq!(t["indices"], s["indices"]);
    assert_eq!(t["points"].as_array().unwrap().len(), PER_CLASS);
    assert!(t.get("eigenvalues").is_none());

    assert_eq!(get(&h.app, &format!("{base}&method=umap")).await.status, StatusCode::NOT_FOUND);
    let r = get(&h.app, "/api/projects/0/embedding?analysis=spray&category=hexagon&method=tsne").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&h.app, "/api/projects/0/embedding?analysis=spray").await.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn clustering_sizes_and_labels() {
    let h = harness(1, false);
    for k in [2, 3, 10] {
        let c = get(&h.app, &format!("/api/projects/0/clustering?analysis=spray&category=circle&name=kmeans-{k}"))
            .await
            .json();
        let labels: Vec<i64> = serde_json::from_value(c["labels"].clone()).unwrap();
        assert_eq!(labels.len(), PER_CLASS);
        assert!(labels.iter().all(|&l| (0..k).contains(&l)));
        let sizes = c["cluster_sizes"].as_object().unwrap();
        assert_eq!(sizes.values().map(|v| v.as_u64().unwrap()).sum::<u64>(), PER_CLASS as u64);
        for (label, n) in sizes {
            let want = labels.iter().filter(|&&l| l.to_string() == *label).count();
            assert_eq!(n.as_u64().unwrap() as usize, want);
        }
    }
    let r = get(&h.app, "/api/projects/0/clustering?analysis=spray&category=circle&name=dbscan").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

fn decode_png(bytes: &[u8]) -> (png::OutputInfo, Vec<u8>, Option<Vec<u8>>) {
    let mut decoder = png::Decoder::new(bytes);
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().unwrap();
    let palette = reader.info().palette.as_ref().map(|p| p.to_vec());
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info, buf, palette)
}

#[tokio::test]
async fn images_modes_and_cache() {
    let h = harness(1, false);
    let hot = get(&h.app, "/api/projects/0/sample/4/image?mode=attribution&colormap=coldnhot").await;
    assert_eq!(hot.status, StatusCode::OK);
    assert_eq!(hot.headers[header::CONTENT_TYPE], "image/png");
    let (info, hot_plane, hot_palette) = decode_png(&hot.body);
    assert_eq!((info.width, info.height), (8, 8));
    assert_eq!(info.color_type, png::ColorType::Indexed);
    assert_eq!(hot_palette.as_ref().unwrap().len(), 256 * 3);

    let gray = get(&h.app, "/api/projects/0/sample/4/image?mode=attribution&colormap=gray").await;
    let (_, gray_plane, gray_palette) = decode_png(&gray.body);
    assert_eq!(hot_plane, gray_plane);
    assert_ne!(hot_palette, gray_palette);

    let overlay = get(&h.app, "/api/projects/0/sample/4/image?mode=overlay").await;
    assert_eq!(decode_png(&overlay.body).0.color_type, png::ColorType::Rgb);
    let input = get(&h.app, "/api/projects/0/sample/4/image?mode=input").await;
    assert_eq!(input.status, StatusCode::OK);

    assert_eq!(h.state.cached_renders(), 4);
    let again = get(&h.app, "/api/projects/0/sample/4/image?mode=attribution&colormap=coldnhot").await;
    assert_eq!(again.body, hot.body);
    assert_eq!(h.state.cached_renders(), 4);
    // The default request is attribution/coldnhot, already cached.
    get(&h.app, "/api/projects/0/sample/4/image").await;
    assert_eq!(h.state.cached_renders(), 4);

    let n = PER_CLASS * 3;
    let r = get(&h.app, &format!("/api/projects/0/sample/{n}/image")).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = get(&h.app, "/api/projects/0/sample/0/image?mode=xray").await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert!(r.json()["error"].as_str().unwrap().contains("xray"));
    let r = get(&h.app, "/api/projects/0/sample/0/image?colormap=rainbow").await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn state_roundtrip() {
    let h = harness(1, false);
    // Keys out of order and spaced: the reply is the canonical form.
    let doc = r#"{ "selected_indices": [3, 1], "mode": "overlay", "colormap": "gray", "project": "0",
                  "analysis": "spray", "category": "circle", "clustering": "kmeans-2", "embedding": "tsne" }"#;
    let posted = send(&h.app, Method::POST, "/api/state", doc.as_bytes().to_vec()).await;
    assert_eq!(posted.status, StatusCode::OK);
    let canon = posted.body.clone();
    let v: Value = serde_json::from_slice(&canon).unwrap();
    assert_eq!(v["selected_indices"], json!([3, 1]));
    let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert!(!String::from_utf8(canon.clone()).unwrap().contains(' '));

    let fetched = get(&h.app, &format!("/api/state?d={}", encode_state_param(&canon))).await;
    assert_eq!(fetched.status, StatusCode::OK);
    assert_eq!(fetched.body, canon);

    let mut tampered = encode_state_param(&canon);
    tampered.insert(5, '*');
    assert_eq!(get(&h.app, &format!("/api/state?d={tampered}")).await.status, StatusCode::BAD_REQUEST);
    let truncated = &encode_state_param(&canon)[..20];
    assert_eq!(get(&h.app, &format!("/api/state?d={truncated}")).await.status, StatusCode::BAD_REQUEST);

    let bad_mode = doc.replace("overlay", "sepia");
    let r = send(&h.app, Method::POST, "/api/state", bad_mode.into_bytes()).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert!(r.json()["error"].as_str().unwrap().contains("mode"));
    let missing = doc.replace(r#""project": "0","#, "");
    assert_eq!(send(&h.app, Method::POST, "/api/state", missing.into_bytes()).await.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn cors_only_when_enabled() {
    let closed = harness(1, false);
    let r = get(&closed.app, "/api/projects").await;
    assert!(r.headers.get(header::ACCESS_CONTROL_ALLOW_ORIGIN).is_none());

    let open = harness(1, true);
    let r = get(&open.app, "/api/projects").await;
    assert_eq!(r.headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
    let r = get(&open.app, "/api/projects/7").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
    let pre = send(&open.app, Method::OPTIONS, "/api/state", Vec::new()).await;
    assert!(pre.status.is_success());
    assert_eq!(pre.headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}
