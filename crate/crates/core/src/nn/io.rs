//! Model directories: `model.json` plus one `VZT1` blob per parameter.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Map, Value};

use super::{Layer, LayerKind, Model, NnError, Result};
use crate::store::{self, StoreError};
use crate::tensor::Tensor;

pub const MODEL_MANIFEST: &str = "model.json";

fn pair(v: (usize, usize)) -> Value {
    json!([v.0, v.1])
}

pub fn save_model(model: &Model, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| NnError::Io(format!("{}: {e}", dir.display())))?;
    let mut layers = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let mut desc = Map::new();
        desc.insert("kind".into(), layer.kind.tag().into());
        desc.insert("name".into(), layer.name.clone().into());
        let mut params = Map::new();
        for (pname, t) in layer.params() {
            let file = format!("{i:03}_{pname}.vzt");
            store::write_blob(&dir.join(&file), t).map_err(|e| store_err(&file, e))?;
            params.insert(pname.into(), file.into());
        }
        desc.insert("params".into(), Value::Object(params));
        match &layer.kind {
            LayerKind::Conv2d { stride, pad, .. } => {
                desc.insert("stride".into(), pair(*stride));
                desc.insert("pad".into(), pair(*pad));
            }
            LayerKind::MaxPool2d { window, stride } | LayerKind::AvgPool2d { window, stride } => {
                desc.insert("window".into(), pair(*window));
                desc.insert("stride".into(), pair(*stride));
            }
            LayerKind::BatchNorm { eps, .. } => {
                desc.insert("eps_bn".into(), json!(eps));
            }
            _ => {}
        }
        layers.push(Value::Object(desc));
    }
    let manifest = json!({ "input_shape": model.input_shape(), "layers": layers });
    let path = dir.join(MODEL_MANIFEST);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| NnError::Io(format!("{}: {e}", path.display())))
}

fn store_err(file: &str, e: StoreError) -> NnError {
    match e {
        StoreError::Format { offset, detail } => NnError::Format {
            file: file.into(),
            offset,
            detail,
        },
        other => NnError::Format {
            file: file.into(),
            offset: 0,
            detail: other.to_string(),
        },
    }
}

struct ManifestText<'a> {
    text: &'a str,
}

impl ManifestText<'_> {
    fn err<T>(&self, needle: Option<&str>, detail: impl Into<String>) -> Result<T> {
        let offset = needle.and_then(|n| self.text.find(n)).unwrap_or(0) as u64;
        Err(NnError::Format {
            file: MODEL_MANIFEST.into(),
            offset,
            detail: detail.into(),
        })
    }
}

fn line_col_offset(text: &str, line: usize, col: usize) -> u64 {
    let start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (start + col.saturating_sub(1)) as u64
}

fn usize_pair(m: &ManifestText, desc: &Map<String, Value>, key: &str, name: &str) -> Result<(usize, usize)> {
    let v = desc.get(key).and_then(Value::as_array);
    match v.map(|a| a.iter().map(Value::as_u64).collect::<Option<Vec<_>>>()) {
        Some(Some(a)) if a.len() == 2 => Ok((a[0] as usize, a[1] as usize)),
        _ => m.err(Some(name), format!("layer `{name}`: `{key}` must be a pair of integers")),
    }
}

pub fn load_model(dir: &Path) -> Result<Model> {
    let path = dir.join(MODEL_MANIFEST);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| NnError::Io(format!("{}: {e}", path.display())))?;
    let m = ManifestText { text: &text };
    let root: Value = serde_json::from_str(&text).map_err(|e| NnError::Format {
        file: MODEL_MANIFEST.into(),
        offset: line_col_offset(&text, e.line(), e.column()),
        detail: e.to_string(),
    })?;
    let input_shape = match root
        .get("input_shape")
        .and_then(Value::as_array)
        .map(|a| a.iter().map(|v| v.as_u64().map(|u| u as usize)).collect::<Option<Vec<_>>>())
    {
        Some(Some(s)) => s,
        _ => return m.err(Some("input_shape"), "`input_shape` must be an integer list"),
    };
    let Some(descs) = root.get("layers").and_then(Value::as_array) else {
        return m.err(Some("layers"), "`layers` must be a list");
    };
    let mut layers = Vec::with_capacity(descs.len());
    for desc in descs {
        let Some(desc) = desc.as_object() else {
            return m.err(Some("layers"), "layer descriptor must be an object");
        };
        let Some(name) = desc.get("name").and_then(Value::as_str) else {
            return m.err(Some("layers"), "layer without `name`");
        };
        let Some(kind) = desc.get("kind").and_then(Value::as_str) else {
            return m.err(Some(name), format!("layer `{name}` without `kind`"));
        };
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        if let Some(p) = desc.get("params").and_then(Value::as_object) {
            for (pname, file) in p {
                let Some(file) = file.as_str() else {
                    return m.err(Some(pname), format!("param `{pname}` must name a blob file"));
                };
                let t = store::read_blob(&dir.join(file)).map_err(|e| store_err(file, e))?;
                params.insert(pname.clone(), t);
            }
        }
        let mut take = |p: &str| -> Result<Tensor> {
            match params.remove(p) {
                Some(t) => Ok(t),
                None => m.err(Some(name), format!("layer `{name}` is missing param `{p}`")),
            }
        };
        let kind = match kind {
            "Linear" => LayerKind::Linear {
                weight: take("weight")?,
                bias: take("bias")?,
            },
            "Conv2D" => LayerKind::Conv2d {
                weight: take("weight")?,
                bias: take("bias")?,
                stride: usize_pair(&m, desc, "stride", name)?,
                pad: usize_pair(&m, desc, "pad", name)?,
            },
            "ReLU" => LayerKind::Relu,
            "Flatten" => LayerKind::Flatten,
            "MaxPool2D" => LayerKind::MaxPool2d {
                window: usize_pair(&m, desc, "window", name)?,
                stride: usize_pair(&m, desc, "stride", name)?,
            },
            "AvgPool2D" => LayerKind::AvgPool2d {
                window: usize_pair(&m, desc, "window", name)?,
                stride: usize_pair(&m, desc, "stride", name)?,
            },
            "BatchNorm" => LayerKind::BatchNorm {
                mean: take("mean")?,
                var: take("var")?,
                scale: take("scale")?,
                shift: take("shift")?,
                eps: match desc.get("eps_bn").and_then(Value::as_f64) {
                    Some(e) => e,
                    None => return m.err(Some(name), format!("layer `{name}` needs `eps_bn`")),
                },
            },
            other => {
                return m.err(
                    Some(&format!("\"{other}\"")),
                    format!("unknown layer kind `{other}`"),
                )
            }
        };
        layers.push(Layer::new(name, kind));
    }
    Model::new(input_shape, layers)
}
