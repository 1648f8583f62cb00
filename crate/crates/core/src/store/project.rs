//! Project manifests and the bundle of stores they reference.
//!
//! ```json
//! {
//!   "project_name": "watermark demo",
//!   "model_name": "demo-cnn",
//!   "dataset": {
//!     "name": "synthetic shapes", "type": "vzstore", "path": "dataset",
//!     "input_width": 32, "input_height": 32,
//!     "up_sampling": "nearest", "down_sampling": "nearest",
//!     "label_map_path": "label-map.json"
//!   },
//!   "attributions": {
//!     "method": "epsilon-gamma-box", "strategy": "true_label", "sources": ["attribution"]
//!   },
//!   "analyses": [{ "method": "spray", "sources": ["analysis"] }]
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::analysis::{AnalysisStore, CategoryAnalysis};
use super::dataset::{AttributionStore, DatasetStore, Labels};
use super::label_map::LabelMap;
use super::{io_err, StoreError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    TrueLabel,
    PredictedLabel,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::TrueLabel => "true_label",
            Strategy::PredictedLabel => "predicted_label",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "true_label" => Some(Strategy::TrueLabel),
            "predicted_label" => Some(Strategy::PredictedLabel),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub path: String,
    pub input_width: u64,
    pub input_height: u64,
    pub up_sampling: String,
    pub down_sampling: String,
    pub label_map_path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionRef {
    pub method: String,
    pub strategy: Strategy,
    pub sources: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRef {
    pub method: String,
    pub sources: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectManifest {
    pub project_name: String,
    pub model_name: String,
    pub dataset: DatasetRef,
    pub attributions: AttributionRef,
    pub analyses: Vec<AnalysisRef>,
}

pub const DATASET_TYPE: &str = "vzstore";

fn missing(field: &str) -> StoreError {
    StoreError::Manifest {
        field: field.into(),
        detail: "missing or of the wrong type".into(),
    }
}

fn obj<'a>(v: &'a Map<String, Value>, key: &str, path: &str) -> Result<&'a Map<String, Value>, StoreError> {
    v.get(key).and_then(Value::as_object).ok_or_else(|| missing(path))
}

fn string(v: &Map<String, Value>, key: &str, path: &str) -> Result<String, StoreError> {
    v.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| missing(path))
}

fn uint(v: &Map<String, Value>, key: &str, path: &str) -> Result<u64, StoreError> {
    v.get(key).and_then(Value::as_u64).ok_or_else(|| missing(path))
}

fn sources(v: &Map<String, Value>, path: &str) -> Result<Vec<String>, StoreError> {
    let field = format!("{path}.sources");
    let list = v
        .get("sources")
        .and_then(Value::as_array)
        .ok_or_else(|| missing(&field))?;
    if list.is_empty() {
        return Err(StoreError::Manifest {
            field,
            detail: "at least one source is required".into(),
        });
    }
    list.iter()
        .enumerate()
        .map(|(i, s)| {
            s.as_str()
                .map(str::to_string)
                .ok_or_else(|| missing(&format!("{field}[{i}]")))
        })
        .collect()
}

impl ProjectManifest {
    /// Parses and type-checks a manifest, naming the first offending field on error.
    pub fn from_json(text: &str) -> Result<Self, StoreError> {
        let root: Value = serde_json::from_str(text).map_err(|e| StoreError::Manifest {
            field: "<root>".into(),
            detail: e.to_string(),
        })?;
        let root = root.as_object().ok_or_else(|| missing("<root>"))?;
        let ds = obj(root, "dataset", "dataset")?;
        let dataset = DatasetRef {
            name: string(ds, "name", "dataset.name")?,
            kind: string(ds, "type", "dataset.type")?,
            path: string(ds, "path", "dataset.path")?,
            input_width: uint(ds, "input_width", "dataset.input_width")?,
            input_height: uint(ds, "input_height", "dataset.input_height")?,
            up_sampling: string(ds, "up_sampling", "dataset.up_sampling")?,
            down_sampling: string(ds, "down_sampling", "dataset.down_sampling")?,
            label_map_path: string(ds, "label_map_path", "dataset.label_map_path")?,
        };
        if dataset.kind != DATASET_TYPE {
            return Err(StoreError::Manifest {
                field: "dataset.type".into(),
                detail: format!("unsupported dataset type `{}`", dataset.kind),
            });
        }
        let at = obj(root, "attributions", "attributions")?;
        let strategy = string(at, "strategy", "attributions.strategy")?;
        let attributions = AttributionRef {
            method: string(at, "method", "attributions.method")?,
            strategy: Strategy::parse(&strategy).ok_or_else(|| StoreError::Manifest {
                field: "attributions.strategy".into(),
                detail: format!("`{strategy}` is neither true_label nor predicted_label"),
            })?,
            sources: sources(at, "attributions")?,
        };
        let analyses = root
            .get("analyses")
            .and_then(Value::as_array)
            .ok_or_else(|| missing("analyses"))?
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let path = format!("analyses[{i}]");
                let a = a.as_object().ok_or_else(|| missing(&path))?;
                Ok(AnalysisRef {
                    method: string(a, "method", &format!("{path}.method"))?,
                    sources: sources(a, &path)?,
                })
            })
            .collect::<Result<Vec<_>, StoreError>>()?;
        Ok(ProjectManifest {
            project_name: string(root, "project_name", "project_name")?,
            model_name: string(root, "model_name", "model_name")?,
            dataset,
            attributions,
            analyses,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        std::fs::write(path, self.to_json()).map_err(|e| io_err(path, e))
    }
}

/// One selectable analysis of a project.
#[derive(Clone, Debug)]
pub struct LoadedAnalysis {
    pub method: String,
    stores: Vec<(AnalysisStore, String)>,
}

impl LoadedAnalysis {
    pub fn categories(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (store, group) in &self.stores {
            for c in store.categories(group) {
                if !out.contains(&c) {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn category(&self, name: &str) -> Result<CategoryAnalysis, StoreError> {
        for (store, group) in &self.stores {
            if store.categories(group).iter().any(|c| c == name) {
                return store.read_category(group, name);
            }
        }
        Err(StoreError::Inconsistent(format!(
            "analysis `{}` has no category `{name}`",
            self.method
        )))
    }
}

/// A fully validated project: the unit served to the explorer.
#[derive(Clone, Debug)]
pub struct ProjectBundle {
    pub manifest: ProjectManifest,
    pub base_dir: PathBuf,
    pub label_map: LabelMap,
    pub dataset: DatasetStore,
    pub attribution: AttributionStore,
    pub analyses: Vec<LoadedAnalysis>,
}

impl ProjectBundle {
    pub fn analysis(&self, method: &str) -> Option<&LoadedAnalysis> {
        self.analyses.iter().find(|a| a.method == method)
    }

    /// Categories of an analysis; one per class when no analysis provides any.
    pub fn categories(&self, method: Option<&str>) -> Vec<String> {
        let from_analysis = method
            .and_then(|m| self.analysis(m))
            .or_else(|| self.analyses.first())
            .map(LoadedAnalysis::categories)
            .unwrap_or_default();
        if from_analysis.is_empty() {
            self.label_map.names()
        } else {
            from_analysis
        }
    }
}

fn resolve(base: &Path, rel: &str, field: &str) -> Result<PathBuf, StoreError> {
    let p = base.join(rel);
    if !p.exists() {
        return Err(StoreError::Manifest {
            field: field.into(),
            detail: format!("{} does not exist", p.display()),
        });
    }
    Ok(p)
}

/// Loads and cross-validates every store a manifest references.
pub fn open_project(manifest_path: &Path) -> Result<ProjectBundle, StoreError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let manifest = ProjectManifest::from_json(&text)?;
    let base_dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let label_map = LabelMap::load(&resolve(
        &base_dir,
        &manifest.dataset.label_map_path,
        "dataset.label_map_path",
    )?)?;
    let dataset = DatasetStore::open(&resolve(&base_dir, &manifest.dataset.path, "dataset.path")?)?;
    check_labels(&dataset.label, &label_map, "dataset")?;

    let parts = manifest
        .attributions
        .sources
        .iter()
        .enumerate()
        .map(|(i, s)| {
            AttributionStore::open(&resolve(&base_dir, s, &format!("attributions.sources[{i}]"))?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let attribution = AttributionStore::concat(parts)?;
    if attribution.len() != dataset.len() {
        return Err(StoreError::Inconsistent(format!(
            "attributions cover {} samples, dataset has {}",
            attribution.len(),
            dataset.len()
        )));
    }
    check_labels(&attribution.label, &label_map, "attribution")?;
    let data_hw = &dataset.data.shape()[2..];
    let attr_hw = &attribution.attribution.shape()[2..];
    if data_hw != attr_hw {
        return Err(StoreError::Inconsistent(format!(
            "attribution maps are {attr_hw:?}, samples are {data_hw:?}"
        )));
    }

    let mut analyses = Vec::new();
    for (i, a) in manifest.analyses.iter().enumerate() {
        let mut stores = Vec::new();
        for (j, s) in a.sources.iter().enumerate() {
            let store =
                AnalysisStore::open(&resolve(&base_dir, s, &format!("analyses[{i}].sources[{j}]"))?)?;
            let groups = store.analyses();
            let group = if groups.iter().any(|g| g == &a.method) {
                a.method.clone()
            } else if groups.len() == 1 {
                groups[0].clone()
            } else {
                return Err(StoreError::Inconsistent(format!(
                    "analysis store {s} has no group `{}` (found {groups:?})",
                    a.method
                )));
            };
            for c in store.categories(&group) {
                let cat = store.read_category(&group, &c)?;
                if let Some(&bad) = cat.index.iter().find(|&&i| i >= dataset.len()) {
                    return Err(StoreError::Inconsistent(format!(
                        "category `{c}` references sample {bad} of {}",
                        dataset.len()
                    )));
                }
            }
            stores.push((store, group));
        }
        analyses.push(LoadedAnalysis {
            method: a.method.clone(),
            stores,
        });
    }

    Ok(ProjectBundle {
        manifest,
        base_dir,
        label_map,
        dataset,
        attribution,
        analyses,
    })
}

fn check_labels(labels: &Labels, map: &LabelMap, what: &str) -> Result<(), StoreError> {
    match labels {
        Labels::Single(v) => {
            if let Some(&bad) = v.iter().find(|&&l| l < 0 || l as usize >= map.len()) {
                return Err(StoreError::Inconsistent(format!(
                    "{what} label {bad} outside label map of {} entries",
                    map.len()
                )));
            }
        }
        Labels::MultiHot { n_labels, .. } => {
            if *n_labels != map.len() {
                return Err(StoreError::Inconsistent(format!(
                    "{what} has {n_labels} multi-hot columns, label map has {}",
                    map.len()
                )));
            }
        }
    }
    Ok(())
}
