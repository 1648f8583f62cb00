use std::path::Path;

use super::container::{Attrs, BlobStore};
use super::StoreError;
use crate::tensor::{DType, Tensor};

/// Per-sample labels: one class index each, or a multi-hot row.
#[derive(Clone, Debug, PartialEq)]
pub enum Labels {
    Single(Vec<i64>),
    MultiHot { n_labels: usize, hot: Vec<u8> },
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Single(v) => v.len(),
            Labels::MultiHot { n_labels, hot } => {
                if *n_labels == 0 {
                    0
                } else {
                    hot.len() / n_labels
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_tensor(&self) -> Tensor {
        match self {
            Labels::Single(v) => Tensor::from_i64(&[v.len()], v.clone()).unwrap(),
            Labels::MultiHot { n_labels, hot } => {
                Tensor::from_u8(&[hot.len() / n_labels.max(&1), *n_labels], hot.clone()).unwrap()
            }
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, StoreError> {
        match (t.dtype(), t.shape()) {
            (DType::I64, [_]) => Ok(Labels::Single(t.as_i64().unwrap().to_vec())),
            (DType::U8, [_, l]) => Ok(Labels::MultiHot {
                n_labels: *l,
                hot: t.as_u8().unwrap().to_vec(),
            }),
            (d, s) => Err(StoreError::Inconsistent(format!(
                "label must be N i64 or NxL u8, found {d} {s:?}"
            ))),
        }
    }

    /// Indices of the labels active for sample `i`.
    pub fn active(&self, i: usize) -> Vec<usize> {
        match self {
            Labels::Single(v) => vec![v[i] as usize],
            Labels::MultiHot { n_labels, hot } => hot[i * n_labels..(i + 1) * n_labels]
                .iter()
                .enumerate()
                .filter(|(_, &h)| h != 0)
                .map(|(j, _)| j)
                .collect(),
        }
    }

    pub fn max_index(&self) -> Option<i64> {
        match self {
            Labels::Single(v) => v.iter().copied().max(),
            Labels::MultiHot { n_labels, .. } => n_labels.checked_sub(1).map(|x| x as i64),
        }
    }
}

fn leading(t: &Tensor) -> usize {
    t.shape().first().copied().unwrap_or(0)
}

/// Source samples (`data`: N x C x H x W, u8 or f32) with their labels.
#[derive(Clone, Debug)]
pub struct DatasetStore {
    pub data: Tensor,
    pub label: Labels,
    store: BlobStore,
}

impl DatasetStore {
    /// Writes a dataset store. `extras` are stored under their own keys.
    pub fn write(
        dir: &Path,
        data: &Tensor,
        label: &Labels,
        extras: &[(&str, Tensor)],
    ) -> Result<Self, StoreError> {
        check_data(data, "data")?;
        if label.len() != leading(data) {
            return Err(StoreError::Inconsistent(format!(
                "label has {} samples, data has {}",
                label.len(),
                leading(data)
            )));
        }
        let mut store = BlobStore::create(dir, "dataset")?;
        store.put("data", data, Attrs::new())?;
        store.put("label", &label.to_tensor(), Attrs::new())?;
        for (key, t) in extras {
            store.put(key, t, Attrs::new())?;
        }
        Ok(DatasetStore {
            data: data.clone(),
            label: label.clone(),
            store,
        })
    }

    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let store = BlobStore::open(dir)?;
        let data = store.get("data")?;
        check_data(&data, "data")?;
        let label = Labels::from_tensor(&store.get("label")?)?;
        if label.len() != leading(&data) {
            return Err(StoreError::Inconsistent(format!(
                "label has {} samples, data has {}",
                label.len(),
                leading(&data)
            )));
        }
        Ok(DatasetStore { data, label, store })
    }

    pub fn len(&self) -> usize {
        leading(&self.data)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sample `i` as C x H x W.
    pub fn sample(&self, i: usize) -> Result<Tensor, StoreError> {
        row(&self.data, i)
    }

    /// Any additional blob stored alongside the dataset.
    pub fn extra(&self, key: &str) -> Result<Tensor, StoreError> {
        self.store.get(key)
    }
}

fn row(t: &Tensor, i: usize) -> Result<Tensor, StoreError> {
    let r = t
        .slice_rows(i, i + 1)
        .map_err(|e| StoreError::Inconsistent(e.to_string()))?;
    r.reshape(&t.shape()[1..])
        .map_err(|e| StoreError::Inconsistent(e.to_string()))
}

fn check_data(data: &Tensor, key: &str) -> Result<(), StoreError> {
    if data.ndim() != 4 {
        return Err(StoreError::Inconsistent(format!(
            "`{key}` must be N x C x H x W, found {:?}",
            data.shape()
        )));
    }
    if !matches!(data.dtype(), DType::U8 | DType::F32) {
        return Err(StoreError::UnsupportedDtype(format!(
            "`{key}` must be u8 or f32, found {}",
            data.dtype()
        )));
    }
    Ok(())
}

/// Attributions with the labels and model outputs of the attributed samples.
#[derive(Clone, Debug)]
pub struct AttributionStore {
    pub attribution: Tensor,
    pub label: Labels,
    pub prediction: Tensor,
}

impl AttributionStore {
    pub fn new(attribution: Tensor, label: Labels, prediction: Tensor) -> Result<Self, StoreError> {
        let s = AttributionStore {
            attribution,
            label,
            prediction,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<(), StoreError> {
        if self.attribution.ndim() != 4 || self.attribution.dtype() != DType::F32 {
            return Err(StoreError::Inconsistent(format!(
                "`attribution` must be N x C x H x W f32, found {} {:?}",
                self.attribution.dtype(),
                self.attribution.shape()
            )));
        }
        if self.prediction.ndim() != 2 || self.prediction.dtype() != DType::F32 {
            return Err(StoreError::Inconsistent(format!(
                "`prediction` must be N x L f32, found {} {:?}",
                self.prediction.dtype(),
                self.prediction.shape()
            )));
        }
        let n = leading(&self.attribution);
        if self.label.len() != n || leading(&self.prediction) != n {
            return Err(StoreError::Inconsistent(format!(
                "sample counts differ: attribution {n}, label {}, prediction {}",
                self.label.len(),
                leading(&self.prediction)
            )));
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), StoreError> {
        self.validate()?;
        let mut store = BlobStore::create(dir, "attribution")?;
        store.put("attribution", &self.attribution, Attrs::new())?;
        store.put("label", &self.label.to_tensor(), Attrs::new())?;
        store.put("prediction", &self.prediction, Attrs::new())?;
        Ok(())
    }

    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        let store = BlobStore::open(dir)?;
        Self::new(
            store.get("attribution")?,
            Labels::from_tensor(&store.get("label")?)?,
            store.get("prediction")?,
        )
    }

    /// Concatenates stores along the sample axis.
    pub fn concat(parts: Vec<AttributionStore>) -> Result<Self, StoreError> {
        if parts.len() == 1 {
            return Ok(parts.into_iter().next().unwrap());
        }
        let err = |e: crate::tensor::TensorError| StoreError::Inconsistent(e.to_string());
        let mut attrs = Vec::new();
        let mut preds = Vec::new();
        let mut labels: Option<Labels> = None;
        for p in parts {
            for i in 0..p.len() {
                attrs.push(row(&p.attribution, i)?);
                preds.push(row(&p.prediction, i)?);
            }
            labels = Some(match (labels, p.label) {
                (None, l) => l,
                (Some(Labels::Single(mut a)), Labels::Single(b)) => {
                    a.extend(b);
                    Labels::Single(a)
                }
                (
                    Some(Labels::MultiHot { n_labels, mut hot }),
                    Labels::MultiHot { n_labels: m, hot: h },
                ) if n_labels == m => {
                    hot.extend(h);
                    Labels::MultiHot { n_labels, hot }
                }
                _ => {
                    return Err(StoreError::Inconsistent(
                        "attribution sources mix label encodings".into(),
                    ))
                }
            });
        }
        let label = labels.ok_or_else(|| StoreError::Inconsistent("no attribution sources".into()))?;
        Self::new(
            Tensor::stack(&attrs).map_err(err)?,
            label,
            Tensor::stack(&preds).map_err(err)?,
        )
    }

    pub fn len(&self) -> usize {
        leading(&self.attribution)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, i: usize) -> Result<Tensor, StoreError> {
        row(&self.attribution, i)
    }
}
