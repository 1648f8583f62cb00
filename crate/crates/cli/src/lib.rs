//! The `relvis` command set as library functions.
//!
//! Every command writes `run.json` next to its outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};

use relvis_core::attribution::{
    composite_by_name, register, render_heatmap, render_input, AttributionError, Colormap,
    CompositeParams, HeatmapMode,
};
use relvis_core::nn::{self, evaluate_accuracy, Model, ModelBuilder, NnError, TrainConfig};
use relvis_core::pipeline::{CacheStore, RunStats};
use relvis_core::png::encode_png;
use relvis_core::spray::{analyze_category, AnalysisParams, SprayError};
use relvis_core::store::project::{AnalysisRef, AttributionRef, DatasetRef, ProjectManifest, DATASET_TYPE};
use relvis_core::store::{
    AnalysisStore, AttributionStore, CategoryAnalysis, DatasetStore, LabelMap, Labels, StoreError, Strategy,
};
use relvis_core::tensor::{DType, Tensor, TensorError};
use relvis_server::ServerError;

pub mod report;
pub mod synth;

pub use report::{watermark_report, WatermarkReport};
pub use synth::SynthSpec;

pub const RUN_FILE: &str = "run.json";
pub const LABEL_MAP_FILE: &str = "label-map.json";
pub const MODEL_DIR: &str = "model";
pub const ANALYSIS_NAME: &str = "spray";
pub const PROJECT_FILE: &str = "project.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("index {index} is out of range for {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Spray(#[from] SprayError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_run_json(dir: &Path, command: &str, body: Value) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut doc = json!({ "command": command, "version": env!("CARGO_PKG_VERSION") });
    if let (Value::Object(d), Value::Object(b)) = (&mut doc, body) {
        d.extend(b);
    }
    let path = dir.join(RUN_FILE);
    let text = serde_json::to_string_pretty(&doc).expect("json serializes");
    std::fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(io(p))
}

// ---------------------------------------------------------------- synth

pub fn cmd_synth(out_dir: &Path, spec: &SynthSpec) -> Result<DatasetStore> {
    let s = synth::generate(spec);
    let n = s.labels.len();
    let extras = [
        ("watermark", Tensor::from_u8(&[n], s.watermark.clone())?),
        ("shape", Tensor::from_u8(&[n], s.shape.clone())?),
    ];
    let store = DatasetStore::write(out_dir, &s.data, &Labels::Single(s.labels), &extras)?;
    LabelMap::from_names(&synth::CLASS_NAMES).save(&out_dir.join(LABEL_MAP_FILE))?;
    write_run_json(
        out_dir,
        "synth",
        json!({
            "n_per_class": spec.n_per_class,
            "watermark_fraction": spec.watermark_fraction,
            "seed": spec.seed,
            "samples": n,
            "watermarked": s.watermark.iter().filter(|&&w| w == 1).count(),
        }),
    )?;
    Ok(store)
}

// ---------------------------------------------------------------- train

/// conv8-relu-pool2-conv16-relu-pool2-flatten-dense64-relu-dense3 on 1x32x32.
pub fn demo_model(seed: u64) -> Result<Model> {
    Ok(ModelBuilder::new(&[1, 32, 32], DType::F32)
        .conv(8, 3, 1, 1)
        .relu()
        .maxpool(2)
        .conv(16, 3, 1, 1)
        .relu()
        .maxpool(2)
        .flatten()
        .linear(64)
        .relu()
        .linear(3)
        .build(seed)?)
}

/// Pixels scaled to `[0, 1]`, f32.
pub fn model_inputs(data: &Tensor) -> Tensor {
    let scale = if data.dtype() == DType::U8 { 1.0 / 255.0 } else { 1.0 };
    let v: Vec<f64> = data.to_f64_vec().into_iter().map(|x| x * scale).collect();
    Tensor::from_f64(data.shape(), v).expect("same extents").cast(DType::F32)
}

fn single_labels(labels: &Labels) -> Result<Vec<usize>> {
    match labels {
        Labels::Single(v) => Ok(v.iter().map(|&l| l as usize).collect()),
        Labels::MultiHot { .. } => Err(StoreError::Inconsistent(
            "training needs one class label per sample".into(),
        )
        .into()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub accuracy: f64,
    pub epochs_run: usize,
    pub epoch_loss: Vec<f64>,
}

pub fn cmd_train(data_dir: &Path, model_out: &Path, epochs: usize, lr: f64, seed: u64) -> Result<TrainSummary> {
    let data = DatasetStore::open(data_dir)?;
    let labels = single_labels(&data.label)?;
    let x = model_inputs(&data.data);
    let init = demo_model(seed)?;
    let cfg = TrainConfig {
        epochs,
        lr,
        seed,
        ..TrainConfig::default()
    };
    let (model, report) = if epochs == 0 {
        let acc = evaluate_accuracy(&init, &x, &labels)?;
        (init, nn::TrainReport { accuracy: acc, epochs_run: 0, epoch_loss: vec![], epoch_accuracy: vec![] })
    } else {
        nn::train_sgd(&init, &x, &labels, &cfg)?
    };
    nn::save_model(&model, model_out)?;
    write_run_json(
        model_out,
        "train",
        json!({
            "data": absolute(data_dir)?,
            "epochs": epochs,
            "epochs_run": report.epochs_run,
            "lr": lr,
            "batch": cfg.batch,
            "momentum": cfg.momentum,
            "seed": seed,
            "train_accuracy": report.accuracy,
            "epoch_loss": report.epoch_loss,
            "epoch_accuracy": report.epoch_accuracy,
        }),
    )?;
    Ok(TrainSummary {
        accuracy: report.accuracy,
        epochs_run: report.epochs_run,
        epoch_loss: report.epoch_loss,
    })
}

// ---------------------------------------------------------------- attribute

pub fn cmd_attribute(
    data_dir: &Path,
    model_dir: &Path,
    out_dir: &Path,
    composite: &str,
    params: &CompositeParams,
    strategy: Strategy,
) -> Result<AttributionStore> {
    let composite_def = composite_by_name(composite, params)?;
    let data = DatasetStore::open(data_dir)?;
    let model = nn::load_model(model_dir)?;
    let assigned = register(&model, &composite_def)?;
    let labels = single_labels(&data.label)?;
    let x = model_inputs(&data.data);
    let n = data.len();
    let n_out: usize = model.output_shape().iter().product();
    let per_sample: Vec<(Vec<f32>, Vec<f32>)> = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(Vec<f32>, Vec<f32>)> {
            let xi = x.slice_rows(i, i + 1)?.reshape(model.input_shape())?;
            let out = model.predict(&xi)?;
            let target = match strategy {
                Strategy::TrueLabel => labels[i],
                Strategy::PredictedLabel => tensor_argmax(&out),
            };
            if target >= n_out {
                return Err(StoreError::Inconsistent(format!(
                    "label {target} of sample {i} exceeds the {n_out} model outputs"
                ))
                .into());
            }
            let mut onehot = vec![0.0; n_out];
            onehot[target] = 1.0;
            let r_out = Tensor::from_f64(out.shape(), onehot)?.cast(model.dtype());
            let (_, rel) = assigned.attribute(&xi, &r_out)?;
            let f = |t: &Tensor| t.to_f64_vec().into_iter().map(|v| v as f32).collect();
            Ok((f(&rel), f(&out)))
        })
        .collect::<Result<_>>()?;
    let mut attr = Vec::with_capacity(n * x.len() / n.max(1));
    let mut pred = Vec::with_capacity(n * n_out);
    for (a, p) in per_sample {
        attr.extend(a);
        pred.extend(p);
    }
    let store = AttributionStore::new(
        Tensor::from_f32(x.shape(), attr)?,
        data.label.clone(),
        Tensor::from_f32(&[n, n_out], pred)?,
    )?;
    store.write(out_dir)?;
    write_run_json(
        out_dir,
        "attribute",
        json!({
            "data": absolute(data_dir)?,
            "model": absolute(model_dir)?,
            "composite": composite,
            "low": params.low,
            "high": params.high,
            "gamma": params.gamma,
            "eps": params.eps,
            "strategy": strategy.as_str(),
            "samples": n,
        }),
    )?;
    Ok(store)
}

fn tensor_argmax(t: &Tensor) -> usize {
    let v = t.to_f64_vec();
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------- analyze

#[derive(Clone, Debug, Default)]
pub struct AnalyzeSummary {
    pub categories: Vec<(String, usize)>,
    pub stats: RunStats,
    pub watermark: Option<WatermarkReport>,
}

/// Options beyond the analysis parameters.
#[derive(Clone, Debug, Default)]
pub struct AnalyzeOptions {
    pub per_category: bool,
    /// Restrict to these category names.
    pub only: Vec<String>,
    /// Source dataset: provides the label map, the project manifest and, when present,
    /// the watermark mask for the report.
    pub data_dir: Option<PathBuf>,
}

pub fn cmd_analyze(
    attr_dir: &Path,
    out_dir: &Path,
    params: &AnalysisParams,
    opts: &AnalyzeOptions,
) -> Result<AnalyzeSummary> {
    let attr = AttributionStore::open(attr_dir)?;
    let n = attr.len();
    let label_map = match &opts.data_dir {
        Some(d) if d.join(LABEL_MAP_FILE).exists() => Some(LabelMap::load(&d.join(LABEL_MAP_FILE))?),
        _ => None,
    };
    let name_of = |c: usize| {
        label_map
            .as_ref()
            .and_then(|m| m.name(c).map(str::to_string))
            .unwrap_or_else(|| format!("class-{c}"))
    };
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    if opts.per_category {
        for i in 0..n {
            for c in attr.label.active(i) {
                groups.entry(c).or_default().push(i);
            }
        }
    }
    let mut categories: Vec<(String, Vec<usize>)> = if opts.per_category {
        groups.into_iter().map(|(c, idx)| (name_of(c), idx)).collect()
    } else {
        vec![("all".to_string(), (0..n).collect())]
    };
    if !opts.only.is_empty() {
        for want in &opts.only {
            if !categories.iter().any(|(name, _)| name == want) {
                return Err(CliError::Usage(format!("no category `{want}`")));
            }
        }
        categories.retain(|(name, _)| opts.only.contains(name));
    }

    let cache = CacheStore::new(out_dir.join("cache"));
    let mut store = AnalysisStore::open_or_create(out_dir)?;
    let mut summary = AnalyzeSummary::default();
    let mut results: Vec<(String, CategoryAnalysis)> = Vec::new();
    for (name, index) in categories {
        let rows = attr.attribution.gather_rows(&index)?;
        let (analysis, stats) = analyze_category(&rows, index.clone(), params, Some(&cache))?;
        log::info!(
            "category {name}: {} samples, {} executed, {} cache hits",
            index.len(),
            stats.total_executed(),
            stats.total_hits()
        );
        store.write_category(ANALYSIS_NAME, &name, &analysis)?;
        summary.stats.merge(&stats);
        summary.categories.push((name.clone(), index.len()));
        results.push((name, analysis));
    }

    let mut run = json!({
        "attributions": absolute(attr_dir)?,
        "analysis": ANALYSIS_NAME,
        "params": {
            "normalize": params.normalize.name(),
            "knn_k": params.knn_k,
            "n_eigval": params.n_eigval,
            "kmeans_range": [params.kmeans_range.start(), params.kmeans_range.end()],
            "tsne_perplexity": params.tsne_perplexity,
            "tsne_iters": params.tsne_iters,
            "tsne_on": format!("{:?}", params.tsne_on).to_lowercase(),
            "seed": params.seed,
        },
        "categories": summary.categories.iter().map(|(c, n)| json!({"name": c, "samples": n})).collect::<Vec<_>>(),
        "executed": summary.stats.total_executed(),
        "cache_hits": summary.stats.total_hits(),
    });

    if let Some(data_dir) = &opts.data_dir {
        let data = DatasetStore::open(data_dir)?;
        if let Ok(mask) = data.extra("watermark") {
            let mask: Vec<bool> = mask.to_f64_vec().into_iter().map(|m| m > 0.0).collect();
            let mut best: Option<WatermarkReport> = None;
            for (name, a) in &results {
                if let Some(r) = watermark_report(&attr, a, &mask, name)? {
                    if best.as_ref().is_none_or(|b| r.better_than(b)) {
                        best = Some(r);
                    }
                }
            }
            if let Some(r) = &best {
                run["watermark"] = r.to_json();
            }
            summary.watermark = best;
        }
        write_project(out_dir, data_dir, attr_dir, out_dir)?;
    }
    write_run_json(out_dir, "analyze", run)?;
    Ok(summary)
}

/// Writes `project.json` into `dir`, referencing the three stores by absolute path.
pub fn write_project(dir: &Path, data_dir: &Path, attr_dir: &Path, analysis_dir: &Path) -> Result<PathBuf> {
    let attr_run = read_run(attr_dir);
    let method = attr_run
        .as_ref()
        .and_then(|v| v["composite"].as_str().map(str::to_string))
        .unwrap_or_else(|| "attribution".into());
    let strategy = attr_run
        .as_ref()
        .and_then(|v| v["strategy"].as_str().and_then(Strategy::parse))
        .unwrap_or(Strategy::TrueLabel);
    let data = DatasetStore::open(data_dir)?;
    let s = |p: &Path| -> Result<String> { Ok(absolute(p)?.to_string_lossy().into_owned()) };
    let manifest = ProjectManifest {
        project_name: format!("{} ({method})", dir_name(data_dir)),
        model_name: "demo-cnn".into(),
        dataset: DatasetRef {
            name: dir_name(data_dir),
            kind: DATASET_TYPE.into(),
            path: s(data_dir)?,
            input_width: data.data.shape()[3] as u64,
            input_height: data.data.shape()[2] as u64,
            up_sampling: "nearest".into(),
            down_sampling: "nearest".into(),
            label_map_path: s(&data_dir.join(LABEL_MAP_FILE))?,
        },
        attributions: AttributionRef {
            method,
            strategy,
            sources: vec![s(attr_dir)?],
        },
        analyses: vec![AnalysisRef {
            method: ANALYSIS_NAME.into(),
            sources: vec![s(analysis_dir)?],
        }],
    };
    let path = dir.join(PROJECT_FILE);
    manifest.save(&path)?;
    Ok(path)
}

fn dir_name(p: &Path) -> String {
    absolute(p)
        .ok()
        .and_then(|a| a.file_name().map(|f| f.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "dataset".into())
}

fn read_run(dir: &Path) -> Option<Value> {
    let text = std::fs::read_to_string(dir.join(RUN_FILE)).ok()?;
    serde_json::from_str(&text).ok()
}

// ---------------------------------------------------------------- render

pub fn parse_mode(s: &str) -> Result<&'static str> {
    match s {
        "input" => Ok("input"),
        "attribution" => Ok("attribution"),
        "overlay" => Ok("overlay"),
        other => Err(CliError::Usage(format!(
            "unknown mode `{other}`, expected input, attribution or overlay"
        ))),
    }
}

/// One PNG per index, named `<index>-<mode>-<colormap>.png`.
pub fn cmd_render(
    attr_dir: &Path,
    data_dir: Option<&Path>,
    indices: &[usize],
    colormap: &str,
    mode: &str,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let cmap = Colormap::parse(colormap)?;
    let mode = parse_mode(mode)?;
    let attr = AttributionStore::open(attr_dir)?;
    let data = match data_dir {
        Some(d) => Some(DatasetStore::open(d)?),
        None if mode == "attribution" => None,
        None => return Err(CliError::Usage(format!("mode `{mode}` needs --data"))),
    };
    for &index in indices {
        if index >= attr.len() {
            return Err(CliError::IndexOutOfRange { index, len: attr.len() });
        }
    }
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::new();
    for &index in indices {
        let base = data.as_ref().map(|d| d.sample(index)).transpose()?;
        let image = match mode {
            "input" => render_input(base.as_ref().expect("checked above"))?,
            "overlay" => render_heatmap(&attr.sample(index)?, cmap, HeatmapMode::Overlay, base.as_ref())?,
            _ => render_heatmap(&attr.sample(index)?, cmap, HeatmapMode::Attribution, None)?,
        };
        let path = out_dir.join(format!("{index:05}-{mode}-{}.png", cmap.name()));
        std::fs::write(&path, encode_png(&image)).map_err(io(&path))?;
        written.push(path);
    }
    write_run_json(
        out_dir,
        "render",
        json!({
            "attributions": absolute(attr_dir)?,
            "indices": indices,
            "colormap": cmap.name(),
            "mode": mode,
            "files": written.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect::<Vec<_>>(),
        }),
    )?;
    Ok(written)
}

// ---------------------------------------------------------------- serve

pub fn load_projects(manifests: &[PathBuf]) -> Result<Vec<relvis_core::store::ProjectBundle>> {
    if manifests.is_empty() {
        return Err(CliError::Usage("serve needs at least one project manifest".into()));
    }
    manifests
        .iter()
        .map(|m| relvis_core::store::open_project(m).map_err(CliError::from))
        .collect()
}

pub fn cmd_serve(manifests: &[PathBuf], host: &str, port: u16, cors: bool) -> Result<()> {
    let projects = load_projects(manifests)?;
    let listener = relvis_server::bind(host, port)?;
    relvis_server::serve_blocking(listener, projects, cors)?;
    Ok(())
}
