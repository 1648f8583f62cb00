//! Spectral relevance analysis: kNN graph, normalized Laplacian, eigenmap embedding,
//! k-means over a range of k, and t-SNE for display.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

mod eigen;
mod graph;
mod kmeans;
mod metrics;
mod tsne;

pub use eigen::{eig_smallest, Eigen};
pub use graph::{knn_affinity, normalized_laplacian, pairwise_distances};
pub use kmeans::{kmeans, KMeansResult};
pub use metrics::{adjusted_rand_index, separability_score};
pub use tsne::{tsne, TsneResult};

use crate::pipeline::{
    parallel, BoxError, CacheStore, FnProcessor, ParamKind, ParamSpec, ParamValue, Params,
    Pipeline, PipelineError, Processor, RunStats, Value,
};
use crate::store::{CategoryAnalysis, Clustering, Embedding};
use crate::tensor::{DType, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum SprayError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("k={k} is invalid for {n} samples")]
    BadK { k: usize, n: usize },
    #[error("affinity matrix is not symmetric: {0}")]
    AsymmetricInput(String),
    #[error("matrix is not symmetric: {0}")]
    NotSymmetric(String),
    #[error("eigensolver did not converge after {0} sweeps")]
    NoConvergence(usize),
    #[error("need at least {need} samples, have {have}")]
    TooFewSamples { need: usize, have: usize },
    #[error("perplexity {perplexity} is too large for {n} samples")]
    PerplexityTooLarge { n: usize, perplexity: f64 },
    #[error("all samples are in one cluster")]
    SingleCluster,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

pub type Result<T> = std::result::Result<T, SprayError>;

/// What t-SNE is run on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TsneInput {
    /// The attributions themselves.
    Raw,
    /// The spectral embedding.
    Spectral,
}

/// Per-sample scaling applied to the flattened attributions before distances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Normalization {
    None,
    /// Each row to unit Euclidean norm; all-zero rows are left as they are.
    L2,
}

impl Normalization {
    pub fn name(self) -> &'static str {
        match self {
            Normalization::None => "none",
            Normalization::L2 => "l2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Normalization::None),
            "l2" => Some(Normalization::L2),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisParams {
    pub normalize: Normalization,
    pub knn_k: usize,
    pub n_eigval: usize,
    pub kmeans_range: RangeInclusive<usize>,
    pub tsne_perplexity: f64,
    pub tsne_iters: usize,
    pub tsne_on: TsneInput,
    pub seed: u64,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        AnalysisParams {
            normalize: Normalization::L2,
            knn_k: 10,
            n_eigval: 8,
            kmeans_range: 2..=19,
            tsne_perplexity: 30.0,
            tsne_iters: 1000,
            tsne_on: TsneInput::Raw,
            seed: 0,
        }
    }
}

const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITER: usize = 300;

fn tensor_in(v: &Value) -> std::result::Result<&Tensor, BoxError> {
    v.as_tensor().ok_or_else(|| "expected a tensor".into())
}

/// The eigenvector matrix, whether given bare or as the `[eigenvalues, vectors]` pair.
fn vectors_in(v: &Value) -> std::result::Result<&Tensor, BoxError> {
    match v.as_list() {
        Some([_, vecs]) => tensor_in(vecs),
        _ => tensor_in(v),
    }
}

/// The first `c` columns of an N x m matrix.
fn leading_columns(x: &Tensor, c: usize) -> Result<Tensor> {
    let (n, m, v) = graph::rows(x)?;
    if c >= m {
        return Ok(x.cast(DType::F64));
    }
    let out: Vec<f64> = (0..n).flat_map(|i| v[i * m..i * m + c].to_vec()).collect();
    Ok(Tensor::from_f64(&[n, c], out)?)
}

fn int(p: &Params, name: &str) -> usize {
    p.int(name).max(0) as usize
}

pub fn normalize_rows(x: &Tensor, how: Normalization) -> Result<Tensor> {
    let (n, d, mut v) = graph::rows(x)?;
    if how == Normalization::L2 {
        for row in v.chunks_mut(d.max(1)) {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|a| *a /= norm);
            }
        }
    }
    Ok(Tensor::from_f64(&[n, d], v)?)
}

pub fn normalize_processor(how: Normalization) -> FnProcessor {
    let spec = ParamSpec::new("norm", ParamKind::Str, Some(ParamValue::Str(how.name().into())));
    FnProcessor::new("normalize", "1", "preprocess", vec![spec], |v, p| {
        let how = Normalization::parse(p.str("norm")).ok_or("norm must be `none` or `l2`")?;
        Ok(normalize_rows(tensor_in(v)?, how)?.into())
    })
}

pub fn distance_processor() -> FnProcessor {
    FnProcessor::new("distance", "1", "distance", vec![], |v, _| {
        Ok(pairwise_distances(tensor_in(v)?)?.into())
    })
}

pub fn affinity_processor(k: usize) -> FnProcessor {
    let spec = ParamSpec::new("k", ParamKind::Int, Some(ParamValue::Int(k as i64)));
    FnProcessor::new("knn-affinity", "1", "affinity", vec![spec], |v, p| {
        Ok(knn_affinity(tensor_in(v)?, int(p, "k"))?.into())
    })
}

pub fn laplacian_processor() -> FnProcessor {
    FnProcessor::new("laplacian", "1", "laplacian", vec![], |v, _| {
        Ok(normalized_laplacian(tensor_in(v)?)?.into())
    })
}

/// Output is `[eigenvalues (m), eigenvectors (N x m)]`.
pub fn eigen_processor(n_eigval: usize) -> FnProcessor {
    let spec = ParamSpec::new("n_eigval", ParamKind::Int, Some(ParamValue::Int(n_eigval as i64)));
    FnProcessor::new("eigen", "1", "embedding", vec![spec], |v, p| {
        let e = eig_smallest(tensor_in(v)?, int(p, "n_eigval"))?;
        let m = e.values.len();
        Ok(Value::List(vec![
            Tensor::from_f64(&[m], e.values)?.into(),
            e.vectors.into(),
        ]))
    })
}

/// Output is `[labels (i64, N), separability]`. Clusters on the `k` leading columns of
/// the spectral embedding (all of them when there are fewer).
pub fn kmeans_processor(k: usize, seed: u64) -> FnProcessor {
    let specs = vec![
        ParamSpec::new("k", ParamKind::Int, Some(ParamValue::Int(k as i64))),
        ParamSpec::new("seed", ParamKind::Int, Some(ParamValue::Int(seed as i64))),
    ];
    FnProcessor::new(&format!("kmeans-{k}"), "1", "clustering", specs, |v, p| {
        let k = int(p, "k");
        let x = leading_columns(vectors_in(v)?, k)?;
        let seed = p.int("seed") as u64;
        let r = kmeans(&x, k, seed, KMEANS_RESTARTS, KMEANS_MAX_ITER)?;
        let sep = match separability_score(&x, &r.labels, seed) {
            Ok(s) => s,
            Err(SprayError::SingleCluster) => f64::NAN,
            Err(e) => return Err(e.into()),
        };
        let n = r.labels.len();
        let labels: Vec<i64> = r.labels.iter().map(|&l| l as i64).collect();
        Ok(Value::List(vec![Tensor::from_i64(&[n], labels)?.into(), sep.into()]))
    })
}

/// Output is `[embedding (N x 2), kl trace]`.
pub fn tsne_processor(perplexity: f64, iters: usize, seed: u64) -> FnProcessor {
    let specs = vec![
        ParamSpec::new("perplexity", ParamKind::Float, Some(ParamValue::Float(perplexity))),
        ParamSpec::new("iters", ParamKind::Int, Some(ParamValue::Int(iters as i64))),
        ParamSpec::new("seed", ParamKind::Int, Some(ParamValue::Int(seed as i64))),
    ];
    FnProcessor::new("tsne", "1", "embedding", specs, |v, p| {
        let r = tsne(vectors_in(v)?, p.float("perplexity"), int(p, "iters"), p.int("seed") as u64)?;
        let t = r.kl.len();
        Ok(Value::List(vec![r.embedding.into(), Tensor::from_f64(&[t], r.kl)?.into()]))
    })
}

/// The spectral pipeline: preprocess, distance, affinity, laplacian, embedding, analysis. The
/// analysis task holds one k-means per k and, for [`TsneInput::Spectral`], t-SNE.
pub fn spray_pipeline(params: &AnalysisParams, io: Option<&CacheStore>) -> Result<Pipeline> {
    let attach = |p: Processor| match io {
        Some(io) => p.with_io(io),
        None => p,
    };
    let kmeans: Vec<Processor> = params
        .kmeans_range
        .clone()
        .map(|k| kmeans_processor(k, params.seed).into())
        .collect();
    let mut analysis = vec![parallel(kmeans, true)];
    if params.tsne_on == TsneInput::Spectral {
        analysis.push(tsne_processor(params.tsne_perplexity, params.tsne_iters, params.seed).into());
    }
    Ok(Pipeline::new()
        .task("preprocess", attach(normalize_processor(params.normalize).into()), Some(&["preprocess"]))?
        .task("distance", attach(distance_processor().into()), Some(&["distance"]))?
        .task("affinity", attach(affinity_processor(params.knn_k).into()), Some(&["affinity"]))?
        .task("laplacian", attach(laplacian_processor().into()), Some(&["laplacian"]))?
        .task(
            "embedding",
            attach(Processor::from(eigen_processor(params.n_eigval)).with_output(true)),
            Some(&["embedding"]),
        )?
        .task(
            "analysis",
            attach(parallel(analysis, true).with_output(true)),
            Some(&["clustering", "embedding"]),
        )?)
}

fn f64s(v: &Value) -> Result<Vec<f64>> {
    match v.as_tensor() {
        Some(t) => Ok(t.to_f64_vec()),
        None => Err(PipelineError::Decode("expected a tensor".into()).into()),
    }
}

fn pair(v: &Value) -> Result<(&Value, &Value)> {
    match v.as_list() {
        Some([a, b]) => Ok((a, b)),
        _ => Err(PipelineError::Decode("expected a pair".into()).into()),
    }
}

fn tsne_embedding(v: &Value, base: Option<&str>) -> Result<Embedding> {
    let (emb, _) = pair(v)?;
    let data = emb
        .as_tensor()
        .ok_or_else(|| PipelineError::Decode("expected a tensor".into()))?
        .cast(DType::F64);
    Ok(Embedding {
        data,
        eigenvalues: None,
        base: base.map(String::from),
        base_index: None,
    })
}

/// Runs the analysis of one category. `attributions` is N x ..., `index` the dataset
/// indices of its rows.
pub fn analyze_category(
    attributions: &Tensor,
    index: Vec<usize>,
    params: &AnalysisParams,
    io: Option<&CacheStore>,
) -> Result<(CategoryAnalysis, RunStats)> {
    let n = *attributions.shape().first().unwrap_or(&0);
    if n != index.len() {
        return Err(SprayError::ShapeMismatch(format!("{n} rows but {} indices", index.len())));
    }
    let need = params.n_eigval.max(*params.kmeans_range.start());
    if n < need {
        return Err(SprayError::TooFewSamples { need, have: n });
    }
    let x = attributions.reshape(&[n, attributions.len() / n])?.cast(DType::F64);
    let out = spray_pipeline(params, io)?.run(x.clone().into())?;
    let mut stats = out.stats.clone();
    let missing = |t: &str| PipelineError::Decode(format!("pipeline produced no `{t}` output"));

    let (vals, vecs) = pair(out.get("embedding").ok_or_else(|| missing("embedding"))?)?;
    let eigenvalues = f64s(vals)?;
    let mut result = CategoryAnalysis {
        index,
        ..Default::default()
    };
    for (i, ev) in eigenvalues.iter().enumerate() {
        result.scores.insert(format!("eigenvalue_{i}"), *ev);
    }
    result.embeddings.insert(
        "spectral".into(),
        Embedding {
            data: vecs.as_tensor().ok_or_else(|| missing("embedding"))?.clone(),
            eigenvalues: Some(eigenvalues),
            base: None,
            base_index: None,
        },
    );

    let analysis = out.get("analysis").ok_or_else(|| missing("analysis"))?;
    let parts = analysis.as_list().ok_or_else(|| missing("analysis"))?;
    let clusterings = parts.first().and_then(Value::as_list).ok_or_else(|| missing("analysis"))?;
    for (k, c) in params.kmeans_range.clone().zip(clusterings) {
        let (labels, sep) = pair(c)?;
        let name = format!("kmeans-{k}");
        if let Some(s) = sep.as_float().filter(|s| s.is_finite()) {
            result.scores.insert(format!("separability-{name}"), s);
        }
        result.clusterings.insert(
            name,
            Clustering {
                labels: f64s(labels)?.into_iter().map(|l| l as i64).collect(),
                embedding: "spectral".into(),
                params: BTreeMap::from([
                    ("k".to_string(), serde_json::json!(k)),
                    ("n_components".to_string(), serde_json::json!(k.min(params.n_eigval))),
                ]),
            },
        );
    }

    let tsne = match params.tsne_on {
        TsneInput::Spectral => tsne_embedding(parts.get(1).ok_or_else(|| missing("tsne"))?, Some("spectral"))?,
        TsneInput::Raw => {
            let leaf = tsne_processor(params.tsne_perplexity, params.tsne_iters, params.seed);
            let leaf: Processor = Processor::from(leaf).with_output(true);
            let leaf = match io {
                Some(io) => leaf.with_io(io),
                None => leaf,
            };
            let raw = Pipeline::new().task("tsne", leaf, Some(&["embedding"]))?.run(x.into())?;
            stats.merge(&raw.stats);
            tsne_embedding(raw.get("tsne").ok_or_else(|| missing("tsne"))?, None)?
        }
    };
    result.embeddings.insert("tsne".into(), tsne);
    Ok((result, stats))
}
