//! Selection documents: the explorer state that can be exported, imported and shared.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::StoreError;

pub const MODES: [&str; 3] = ["input", "attribution", "overlay"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionDocument {
    pub project: String,
    pub analysis: String,
    pub category: String,
    pub clustering: String,
    pub embedding: String,
    pub colormap: String,
    pub mode: String,
    pub selected_indices: Vec<u64>,
}

fn schema<T>(field: &str, detail: impl Into<String>) -> Result<T, StoreError> {
    Err(StoreError::Schema {
        field: field.into(),
        detail: detail.into(),
    })
}

impl SelectionDocument {
    pub fn validate(&self) -> Result<(), StoreError> {
        if !MODES.contains(&self.mode.as_str()) {
            return schema("mode", format!("`{}` is not one of {MODES:?}", self.mode));
        }
        if !crate::attribution::Colormap::NAMES.contains(&self.colormap.as_str()) {
            return schema(
                "colormap",
                format!("unknown colormap `{}`", self.colormap),
            );
        }
        Ok(())
    }
}

/// Canonical form: compact JSON, keys sorted, UTF-8.
pub fn encode_selection(doc: &SelectionDocument) -> Result<Vec<u8>, StoreError> {
    doc.validate()?;
    // serde_json's default map is ordered, so going through `Value` sorts the keys.
    let value = serde_json::to_value(doc).expect("selection serializes");
    Ok(serde_json::to_vec(&value).expect("value serializes"))
}

pub fn decode_selection(bytes: &[u8]) -> Result<SelectionDocument, StoreError> {
    let value: Value = match serde_json::from_slice(bytes) {
        Ok(v) => v,
        Err(e) => return schema("<root>", e.to_string()),
    };
    let Some(obj) = value.as_object() else {
        return schema("<root>", "expected an object");
    };
    let text = |m: &Map<String, Value>, k: &str| -> Result<String, StoreError> {
        match m.get(k).and_then(Value::as_str) {
            Some(s) => Ok(s.to_string()),
            None => schema(k, "missing or not a string"),
        }
    };
    let indices = match obj.get("selected_indices").and_then(Value::as_array) {
        Some(a) => a
            .iter()
            .map(|v| v.as_u64())
            .collect::<Option<Vec<_>>>()
            .map_or_else(
                || schema("selected_indices", "entries must be non-negative integers"),
                Ok,
            )?,
        None => return schema("selected_indices", "missing or not an array"),
    };
    if let Some(extra) = obj.keys().find(|k| {
        ![
            "project",
            "analysis",
            "category",
            "clustering",
            "embedding",
            "colormap",
            "mode",
            "selected_indices",
        ]
        .contains(&k.as_str())
    }) {
        return schema(extra, "unknown field");
    }
    let doc = SelectionDocument {
        project: text(obj, "project")?,
        analysis: text(obj, "analysis")?,
        category: text(obj, "category")?,
        clustering: text(obj, "clustering")?,
        embedding: text(obj, "embedding")?,
        colormap: text(obj, "colormap")?,
        mode: text(obj, "mode")?,
        selected_indices: indices,
    };
    doc.validate()?;
    Ok(doc)
}
