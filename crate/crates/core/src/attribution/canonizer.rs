use super::{AttributionError, Result};
use crate::nn::{Layer, LayerKind, Model};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Canonizer {
    /// Folds every batch norm into the linear or convolutional layer before it.
    MergeBatchNorm,
}

/// What a canonizer changed, so it can be undone.
#[derive(Clone, Debug)]
pub struct CanonizerState {
    /// `(position of the batch norm, original affine layer, removed batch norm)`, in
    /// application order.
    merged: Vec<(usize, Layer, Layer)>,
}

impl Canonizer {
    pub fn apply(&self, model: &mut Model) -> Result<CanonizerState> {
        match self {
            Canonizer::MergeBatchNorm => merge_batchnorm(model),
        }
    }
}

impl CanonizerState {
    /// Puts the original layers back. The restored parameters are the stored originals,
    /// so the model is bitwise identical to its state before `apply`.
    pub fn restore(self, model: &mut Model) {
        let layers = model.layers_mut();
        for (pos, affine, bn) in self.merged.into_iter().rev() {
            layers[pos - 1] = affine;
            layers.insert(pos, bn);
        }
    }

    pub fn merged_count(&self) -> usize {
        self.merged.len()
    }
}

fn merge_batchnorm(model: &mut Model) -> Result<CanonizerState> {
    // Validate everything before touching the model.
    for (i, l) in model.layers().iter().enumerate() {
        if matches!(l.kind, LayerKind::BatchNorm { .. })
            && (i == 0 || !model.layers()[i - 1].kind.is_affine())
        {
            return Err(AttributionError::OrphanBatchNorm(l.name.clone()));
        }
    }
    let mut merged = Vec::new();
    let layers = model.layers_mut();
    let mut i = 0;
    while i < layers.len() {
        let LayerKind::BatchNorm {
            mean,
            var,
            scale,
            shift,
            eps,
        } = &layers[i].kind
        else {
            i += 1;
            continue;
        };
        let factor: Vec<f64> = var
            .to_f64_vec()
            .iter()
            .zip(scale.to_f64_vec())
            .map(|(v, g)| g / (v + eps).sqrt())
            .collect();
        let mu = mean.to_f64_vec();
        let beta = shift.to_f64_vec();
        let original = layers[i - 1].clone();
        let (LayerKind::Linear { weight, bias } | LayerKind::Conv2d { weight, bias, .. }) =
            &mut layers[i - 1].kind
        else {
            unreachable!("checked above");
        };
        let rows = weight.shape()[0];
        let per = weight.len() / rows.max(1);
        let w: Vec<f64> = weight
            .to_f64_vec()
            .iter()
            .enumerate()
            .map(|(k, v)| v * factor[k / per])
            .collect();
        let b: Vec<f64> = bias
            .to_f64_vec()
            .iter()
            .enumerate()
            .map(|(o, v)| (v - mu[o]) * factor[o] + beta[o])
            .collect();
        *weight = Tensor::from_f64(weight.shape(), w)?.cast(weight.dtype());
        *bias = Tensor::from_f64(bias.shape(), b)?.cast(bias.dtype());
        let bn = layers.remove(i);
        merged.push((i, original, bn));
    }
    Ok(CanonizerState { merged })
}

/// Returns a canonized copy of `model` plus the state needed to restore it.
pub fn canonize_merge_batchnorm(model: &Model) -> Result<(Model, CanonizerState)> {
    let mut m = model.clone();
    let state = Canonizer::MergeBatchNorm.apply(&mut m)?;
    Ok((m, state))
}
