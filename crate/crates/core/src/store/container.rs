use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::blob;
use super::{io_err, StoreError};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "vzstore-1";

pub type Attrs = BTreeMap<String, Value>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub file: String,
    /// Recorded at write time and checked on read, so a damaged header that still
    /// parses is caught.
    pub dtype: String,
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: Attrs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    kind: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attrs: Attrs,
    entries: BTreeMap<String, Entry>,
}

/// Directory of tensor blobs indexed by `manifest.json`.
///
/// Writes go to disk immediately; the manifest is rewritten on every `put` so a store is
/// always re-openable.
#[derive(Clone, Debug)]
pub struct BlobStore {
    root: PathBuf,
    manifest: Manifest,
}

impl BlobStore {
    pub fn create(root: &Path, kind: &str) -> Result<Self, StoreError> {
        std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        let store = BlobStore {
            root: root.to_path_buf(),
            manifest: Manifest {
                format: FORMAT.into(),
                kind: kind.into(),
                attrs: Attrs::new(),
                entries: BTreeMap::new(),
            },
        };
        store.flush()?;
        Ok(store)
    }

    /// Opens an existing store, or creates it when the directory has no manifest.
    pub fn open_or_create(root: &Path, kind: &str) -> Result<Self, StoreError> {
        if root.join(MANIFEST).exists() {
            Self::open(root)
        } else {
            Self::create(root, kind)
        }
    }

    pub fn open(root: &Path) -> Result<Self, StoreError> {
        let path = root.join(MANIFEST);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::Inconsistent(format!("no store at {}", root.display())))
            }
            Err(e) => return Err(io_err(&path, e)),
        };
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| StoreError::Manifest {
                field: "manifest.json".into(),
                detail: e.to_string(),
            })?;
        if manifest.format != FORMAT {
            return Err(StoreError::Manifest {
                field: "format".into(),
                detail: format!("expected {FORMAT}, found {}", manifest.format),
            });
        }
        Ok(BlobStore {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn kind(&self) -> &str {
        &self.manifest.kind
    }

    pub fn store_attrs(&self) -> &Attrs {
        &self.manifest.attrs
    }

    pub fn set_store_attr(&mut self, name: &str, value: Value) -> Result<(), StoreError> {
        self.manifest.attrs.insert(name.into(), value);
        self.flush()
    }

    fn flush(&self) -> Result<(), StoreError> {
        let path = self.root.join(MANIFEST);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    pub fn put(&mut self, key: &str, t: &Tensor, attrs: Attrs) -> Result<(), StoreError> {
        let file = match self.manifest.entries.get(key) {
            Some(e) => e.file.clone(),
            None => format!("{:05}.vzt", self.manifest.entries.len()),
        };
        blob::write_blob(&self.root.join(&file), t)?;
        self.manifest
            .entries
            .insert(
                key.to_string(),
                Entry {
                    file,
                    dtype: t.dtype().name().to_string(),
                    shape: t.shape().to_vec(),
                    attrs,
                },
            );
        self.flush()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.manifest.entries.contains_key(key)
    }

    pub fn entry(&self, key: &str) -> Option<&Entry> {
        self.manifest.entries.get(key)
    }

    pub fn get(&self, key: &str) -> Result<Tensor, StoreError> {
        let entry = self
            .entry(key)
            .ok_or_else(|| StoreError::Inconsistent(format!("missing key `{key}`")))?;
        let t = blob::read_blob(&self.root.join(&entry.file))?;
        if t.dtype().name() != entry.dtype || t.shape() != entry.shape.as_slice() {
            return Err(StoreError::Inconsistent(format!(
                "`{key}` is {} {:?} on disk but {} {:?} in the manifest",
                t.dtype().name(),
                t.shape(),
                entry.dtype,
                entry.shape
            )));
        }
        Ok(t)
    }

    pub fn attrs(&self, key: &str) -> Option<&Attrs> {
        self.entry(key).map(|e| &e.attrs)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.manifest.entries.keys().map(String::as_str)
    }
}
