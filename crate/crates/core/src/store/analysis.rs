//! Analysis results: per analysis, per category, an `index` blob plus `embedding/<name>`
//! and `cluster/<name>` blobs with their attributes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde_json::Value;

use super::container::{Attrs, BlobStore};
use super::StoreError;
use crate::tensor::{DType, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    /// N x d, f64.
    pub data: Tensor,
    pub eigenvalues: Option<Vec<f64>>,
    /// Name of the embedding this one was computed from.
    pub base: Option<String>,
    /// Columns of the base embedding that were used.
    pub base_index: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    pub labels: Vec<i64>,
    /// Embedding the clustering was computed on.
    pub embedding: String,
    pub params: BTreeMap<String, Value>,
}

impl Clustering {
    pub fn n_clusters(&self) -> usize {
        match self.params.get("k").and_then(Value::as_u64) {
            Some(k) => k as usize,
            None => self.labels.iter().copied().max().map_or(0, |m| m as usize + 1),
        }
    }
}

/// Everything one analysis run produced for one category of samples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CategoryAnalysis {
    /// Dataset indices of the samples in this category; row `r` of every embedding and
    /// clustering refers to sample `index[r]`.
    pub index: Vec<usize>,
    pub embeddings: BTreeMap<String, Embedding>,
    pub clusterings: BTreeMap<String, Clustering>,
    /// Auxiliary per-category scalars.
    pub scores: BTreeMap<String, f64>,
}

impl CategoryAnalysis {
    pub fn validate(&self) -> Result<(), StoreError> {
        let n = self.index.len();
        let bad = |m: String| Err(StoreError::Inconsistent(m));
        for (name, e) in &self.embeddings {
            if e.data.ndim() != 2 || e.data.shape()[0] != n {
                return bad(format!(
                    "embedding `{name}` has shape {:?}, expected {n} rows",
                    e.data.shape()
                ));
            }
            if let Some(base) = &e.base {
                if !self.embeddings.contains_key(base) {
                    return bad(format!("embedding `{name}` refers to missing base `{base}`"));
                }
            }
        }
        for (name, c) in &self.clusterings {
            if c.labels.len() != n {
                return bad(format!(
                    "clustering `{name}` has {} labels, expected {n}",
                    c.labels.len()
                ));
            }
            let k = c.n_clusters() as i64;
            if c.labels.iter().any(|&l| l < 0 || l >= k) {
                return bad(format!("clustering `{name}` has labels outside 0..{k}"));
            }
            if !self.embeddings.contains_key(&c.embedding) {
                return bad(format!(
                    "clustering `{name}` refers to missing embedding `{}`",
                    c.embedding
                ));
            }
        }
        Ok(())
    }
}

fn check_name(what: &str, name: &str) -> Result<(), StoreError> {
    if name.is_empty() || name.contains('/') {
        return Err(StoreError::Schema {
            field: what.into(),
            detail: format!("`{name}` must be non-empty and contain no '/'"),
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AnalysisStore {
    store: BlobStore,
}

impl AnalysisStore {
    pub fn create(dir: &Path) -> Result<Self, StoreError> {
        Ok(AnalysisStore {
            store: BlobStore::create(dir, "analysis")?,
        })
    }

    pub fn open_or_create(dir: &Path) -> Result<Self, StoreError> {
        Ok(AnalysisStore {
            store: BlobStore::open_or_create(dir, "analysis")?,
        })
    }

    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let store = BlobStore::open(dir)?;
        if store.kind() != "analysis" {
            return Err(StoreError::Inconsistent(format!(
                "{} is a `{}` store, not an analysis store",
                dir.display(),
                store.kind()
            )));
        }
        Ok(AnalysisStore { store })
    }

    pub fn write_category(
        &mut self,
        analysis: &str,
        category: &str,
        result: &CategoryAnalysis,
    ) -> Result<(), StoreError> {
        check_name("analysis", analysis)?;
        check_name("category", category)?;
        result.validate()?;
        let prefix = format!("{analysis}/{category}");
        let index: Vec<i64> = result.index.iter().map(|&i| i as i64).collect();
        self.store.put(
            &format!("{prefix}/index"),
            &Tensor::from_i64(&[index.len()], index).unwrap(),
            Attrs::new(),
        )?;
        for (name, e) in &result.embeddings {
            check_name("embedding", name)?;
            let mut attrs = Attrs::new();
            if let Some(ev) = &e.eigenvalues {
                attrs.insert("eigenvalue".into(), Value::from(ev.clone()));
            }
            if let Some(base) = &e.base {
                attrs.insert("embedding".into(), Value::from(base.clone()));
            }
            if let Some(idx) = &e.base_index {
                attrs.insert("index".into(), Value::from(idx.clone()));
            }
            self.store.put(
                &format!("{prefix}/embedding/{name}"),
                &e.data.cast(DType::F64),
                attrs,
            )?;
        }
        for (name, c) in &result.clusterings {
            check_name("clustering", name)?;
            let mut attrs = Attrs::new();
            attrs.insert("embedding".into(), Value::from(c.embedding.clone()));
            if !c.params.is_empty() {
                attrs.insert(
                    "params".into(),
                    Value::Object(c.params.clone().into_iter().collect()),
                );
            }
            self.store.put(
                &format!("{prefix}/cluster/{name}"),
                &Tensor::from_i64(&[c.labels.len()], c.labels.clone()).unwrap(),
                attrs,
            )?;
        }
        for (name, &v) in &result.scores {
            check_name("score", name)?;
            self.store.put(
                &format!("{prefix}/score/{name}"),
                &Tensor::scalar(DType::F64, v),
                Attrs::new(),
            )?;
        }
        Ok(())
    }

    pub fn analyses(&self) -> Vec<String> {
        let set: BTreeSet<String> = self
            .store
            .keys()
            .filter_map(|k| k.split('/').next().map(str::to_string))
            .collect();
        set.into_iter().collect()
    }

    pub fn categories(&self, analysis: &str) -> Vec<String> {
        let prefix = format!("{analysis}/");
        let set: BTreeSet<String> = self
            .store
            .keys()
            .filter_map(|k| k.strip_prefix(&prefix))
            .filter_map(|rest| rest.split('/').next().map(str::to_string))
            .collect();
        set.into_iter().collect()
    }

    pub fn read_category(
        &self,
        analysis: &str,
        category: &str,
    ) -> Result<CategoryAnalysis, StoreError> {
        let prefix = format!("{analysis}/{category}/");
        let index_key = format!("{prefix}index");
        if !self.store.contains(&index_key) {
            return Err(StoreError::Inconsistent(format!(
                "no category `{category}` in analysis `{analysis}`"
            )));
        }
        let index = as_i64(&self.store.get(&index_key)?, &index_key)?
            .into_iter()
            .map(|i| {
                usize::try_from(i)
                    .map_err(|_| StoreError::Inconsistent(format!("negative index {i}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = CategoryAnalysis {
            index,
            ..Default::default()
        };
        let keys: Vec<String> = self
            .store
            .keys()
            .filter(|k| k.starts_with(&prefix))
            .map(str::to_string)
            .collect();
        for key in keys {
            let rest = &key[prefix.len()..];
            let attrs = self.store.attrs(&key).cloned().unwrap_or_default();
            if let Some(name) = rest.strip_prefix("embedding/") {
                let data = self.store.get(&key)?;
                let eigenvalues = match attrs.get("eigenvalue") {
                    Some(v) => Some(f64_list(v, &key)?),
                    None => None,
                };
                let base_index = match attrs.get("index") {
                    Some(v) => Some(
                        f64_list(v, &key)?
                            .into_iter()
                            .map(|x| x as usize)
                            .collect(),
                    ),
                    None => None,
                };
                out.embeddings.insert(
                    name.to_string(),
                    Embedding {
                        data,
                        eigenvalues,
                        base: attrs
                            .get("embedding")
                            .and_then(Value::as_str)
                            .map(str::to_string),
                        base_index,
                    },
                );
            } else if let Some(name) = rest.strip_prefix("cluster/") {
                let labels = as_i64(&self.store.get(&key)?, &key)?;
                let embedding = attrs
                    .get("embedding")
                    .and_then(Value::as_str)
                    .ok_or_else(|| {
                        StoreError::Inconsistent(format!("`{key}` lacks an `embedding` attribute"))
                    })?
                    .to_string();
                let params = match attrs.get("params") {
                    Some(Value::Object(m)) => m.clone().into_iter().collect(),
                    _ => BTreeMap::new(),
                };
                out.clusterings.insert(
                    name.to_string(),
                    Clustering {
                        labels,
                        embedding,
                        params,
                    },
                );
            } else if let Some(name) = rest.strip_prefix("score/") {
                let t = self.store.get(&key)?;
                let v = t.to_f64_vec().first().copied().ok_or_else(|| {
                    StoreError::Inconsistent(format!("`{key}` is empty"))
                })?;
                out.scores.insert(name.to_string(), v);
            }
        }
        out.validate()?;
        Ok(out)
    }
}

fn as_i64(t: &Tensor, key: &str) -> Result<Vec<i64>, StoreError> {
    match (t.as_i64(), t.ndim()) {
        (Some(v), 1) => Ok(v.to_vec()),
        _ => Err(StoreError::Inconsistent(format!(
            "`{key}` must be a 1-D i64 blob, found {} {:?}",
            t.dtype(),
            t.shape()
        ))),
    }
}

fn f64_list(v: &Value, key: &str) -> Result<Vec<f64>, StoreError> {
    v.as_array()
        .and_then(|a| a.iter().map(Value::as_f64).collect::<Option<Vec<_>>>())
        .ok_or_else(|| StoreError::Inconsistent(format!("`{key}` attribute is not a number list")))
}
