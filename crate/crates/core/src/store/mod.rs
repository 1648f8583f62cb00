//! Portable on-disk formats.
//!
//! A store is a directory holding `VZT1` tensor blobs plus a `manifest.json` that maps
//! key names (`data`, `label`, `attribution`, `prediction`, `index`, `embedding/...`,
//! `cluster/...`) to blob files and attribute maps.

use std::path::{Path, PathBuf};

pub mod analysis;
pub mod blob;
pub mod container;
pub mod dataset;
pub mod label_map;
pub mod project;
pub mod selection;

pub use analysis::{AnalysisStore, CategoryAnalysis, Clustering, Embedding};
pub use blob::{read_blob, write_blob};
pub use container::BlobStore;
pub use dataset::{AttributionStore, DatasetStore, Labels};
pub use label_map::{Label, LabelMap};
pub use project::{open_project, AnalysisRef, AttributionRef, DatasetRef, ProjectBundle, ProjectManifest, Strategy};
pub use selection::{decode_selection, encode_selection, SelectionDocument};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },
    #[error("unsupported dtype: {0}")]
    UnsupportedDtype(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest error in field `{field}`: {detail}")]
    Manifest { field: String, detail: String },
    #[error("store inconsistent: {0}")]
    Inconsistent(String),
    #[error("schema error in field `{field}`: {detail}")]
    Schema { field: String, detail: String },
}

impl StoreError {
    /// Field named by a manifest or schema error.
    pub fn field(&self) -> Option<&str> {
        match self {
            StoreError::Manifest { field, .. } | StoreError::Schema { field, .. } => Some(field),
            _ => None,
        }
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}
