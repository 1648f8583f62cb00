//! Feed-forward models: layer descriptions, forward pass with a recorded trace, and
//! vector-Jacobian products.

use std::collections::HashSet;

use rand::Rng as _;

use crate::rng;
use crate::tensor::{self, DType, Tensor, TensorError};

mod io;
mod train;

pub use io::{load_model, save_model, MODEL_MANIFEST};
pub use train::{evaluate_accuracy, train_sgd, TrainConfig, TrainReport};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid layer `{name}`: {detail}")]
    InvalidLayer { name: String, detail: String },
    #[error("duplicate layer name `{0}`")]
    DuplicateName(String),
    #[error("trace does not belong to this model: {0}")]
    TraceMismatch(String),
    #[error("format error in {file} at byte {offset}: {detail}")]
    Format {
        file: String,
        offset: u64,
        detail: String,
    },
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    /// `y = W x + b` with `W: out x in`.
    Linear { weight: Tensor, bias: Tensor },
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    Relu,
    MaxPool2d {
        window: (usize, usize),
        stride: (usize, usize),
    },
    AvgPool2d {
        window: (usize, usize),
        stride: (usize, usize),
    },
    Flatten,
    /// Inference-only batch normalisation over the leading (channel) axis.
    BatchNorm {
        mean: Tensor,
        var: Tensor,
        scale: Tensor,
        shift: Tensor,
        eps: f64,
    },
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Linear { .. } => "Linear",
            LayerKind::Conv2d { .. } => "Conv2D",
            LayerKind::Relu => "ReLU",
            LayerKind::MaxPool2d { .. } => "MaxPool2D",
            LayerKind::AvgPool2d { .. } => "AvgPool2D",
            LayerKind::Flatten => "Flatten",
            LayerKind::BatchNorm { .. } => "BatchNorm",
        }
    }

    /// Linear and convolutional layers.
    pub fn is_affine(&self) -> bool {
        matches!(self, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Layer {
            name: name.into(),
            kind,
        }
    }

    fn invalid<T>(&self, detail: impl Into<String>) -> Result<T> {
        Err(NnError::InvalidLayer {
            name: self.name.clone(),
            detail: detail.into(),
        })
    }

    /// Checks parameter consistency and infers the output extents.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match &self.kind {
            LayerKind::Linear { weight, bias } => {
                let &[out, inp] = weight.shape() else {
                    return self.invalid(format!("weight {:?} is not a matrix", weight.shape()));
                };
                if bias.shape() != [out] {
                    return self.invalid(format!("bias {:?} for {out} outputs", bias.shape()));
                }
                if input != [inp] {
                    return Err(NnError::ShapeMismatch(format!(
                        "layer `{}` expects [{inp}], got {input:?}",
                        self.name
                    )));
                }
                Ok(vec![out])
            }
            LayerKind::Conv2d {
                weight,
                bias,
                stride,
                pad,
            } => {
                let &[o, c, kh, kw] = weight.shape() else {
                    return self.invalid(format!("kernel {:?} is not OxCxKhxKw", weight.shape()));
                };
                if bias.shape() != [o] {
                    return self.invalid(format!("bias {:?} for {o} filters", bias.shape()));
                }
                let &[ic, h, w] = input else {
                    return Err(NnError::ShapeMismatch(format!(
                        "layer `{}` expects CxHxW, got {input:?}",
                        self.name
                    )));
                };
                if ic != c {
                    return Err(NnError::ShapeMismatch(format!(
                        "layer `{}` expects {c} channels, got {ic}",
                        self.name
                    )));
                }
                let (oh, ow) = tensor::conv2d_output_hw(h, w, (kh, kw), *stride, *pad)?;
                Ok(vec![o, oh, ow])
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool2d { window, stride } | LayerKind::AvgPool2d { window, stride } => {
                let &[c, h, w] = input else {
                    return Err(NnError::ShapeMismatch(format!(
                        "layer `{}` expects CxHxW, got {input:?}",
                        self.name
                    )));
                };
                let (oh, ow) = tensor::conv2d_output_hw(h, w, *window, *stride, (0, 0))?;
                Ok(vec![c, oh, ow])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::BatchNorm {
                mean,
                var,
                scale,
                shift,
                eps,
            } => {
                let c = *input.first().unwrap_or(&0);
                for (p, t) in [("mean", mean), ("var", var), ("scale", scale), ("shift", shift)] {
                    if t.shape() != [c] {
                        return self.invalid(format!("{p} {:?} for {c} channels", t.shape()));
                    }
                }
                if *eps < 0.0 {
                    return self.invalid("eps_bn must be non-negative");
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Parameter tensors in a fixed order, with their manifest names.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match &self.kind {
            LayerKind::Linear { weight, bias } | LayerKind::Conv2d { weight, bias, .. } => {
                vec![("weight", weight), ("bias", bias)]
            }
            LayerKind::BatchNorm {
                mean,
                var,
                scale,
                shift,
                ..
            } => vec![("mean", mean), ("var", var), ("scale", scale), ("shift", shift)],
            _ => Vec::new(),
        }
    }
}

/// Output of one layer's forward pass.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub output: Tensor,
    /// Winning input offsets, for max pooling.
    pub argmax: Option<Vec<usize>>,
}

/// `W x + b` for a vector input.
pub fn linear(weight: &Tensor, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n_in = weight.shape().get(1).copied().unwrap_or(0);
    let col = x.reshape(&[n_in, 1])?;
    let y = tensor::matmul(weight, &col)?;
    Ok(tensor::add(&y.reshape(bias.shape())?, bias)?)
}

/// `Wᵀ g` for a vector `g`.
pub fn linear_input_vjp(weight: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let n_out = weight.shape()[0];
    let row = grad.reshape(&[1, n_out])?;
    let y = tensor::matmul(&row, weight)?;
    Ok(y.reshape(&[weight.shape()[1]])?)
}

fn bn_factors(var: &Tensor, scale: &Tensor, eps: f64) -> Vec<f64> {
    var.to_f64_vec()
        .iter()
        .zip(scale.to_f64_vec())
        .map(|(v, g)| g / (v + eps).sqrt())
        .collect()
}

fn per_channel(x: &Tensor, f: impl Fn(usize, f64) -> f64) -> Result<Tensor> {
    let c = x.shape().first().copied().unwrap_or(1).max(1);
    let per = x.len() / c;
    let vals: Vec<f64> = x
        .to_f64_vec()
        .iter()
        .enumerate()
        .map(|(i, &v)| f(i / per.max(1), v))
        .collect();
    Ok(Tensor::from_f64(x.shape(), vals)?.cast(x.dtype()))
}

impl Layer {
    pub fn forward(&self, x: &Tensor) -> Result<LayerOutput> {
        let plain = |output| LayerOutput {
            output,
            argmax: None,
        };
        Ok(match &self.kind {
            LayerKind::Linear { weight, bias } => plain(linear(weight, x, bias)?),
            LayerKind::Conv2d {
                weight,
                bias,
                stride,
                pad,
            } => plain(tensor::conv2d(x, weight, bias, *stride, *pad)?),
            LayerKind::Relu => plain(tensor::relu(x)?),
            LayerKind::MaxPool2d { window, stride } => {
                let mp = tensor::maxpool2d(x, *window, *stride)?;
                LayerOutput {
                    output: mp.output,
                    argmax: Some(mp.argmax),
                }
            }
            LayerKind::AvgPool2d { window, stride } => {
                plain(tensor::avgpool2d(x, *window, *stride)?)
            }
            LayerKind::Flatten => plain(x.reshape(&[x.len()])?),
            LayerKind::BatchNorm {
                mean,
                var,
                scale,
                shift,
                eps,
            } => {
                let f = bn_factors(var, scale, *eps);
                let mu = mean.to_f64_vec();
                let beta = shift.to_f64_vec();
                plain(per_channel(x, |c, v| (v - mu[c]) * f[c] + beta[c])?)
            }
        })
    }

    /// Gradient of `<output, grad>` with respect to the layer input.
    pub fn input_vjp(&self, input: &Tensor, argmax: Option<&[usize]>, grad: &Tensor) -> Result<Tensor> {
        Ok(match &self.kind {
            LayerKind::Linear { weight, .. } => linear_input_vjp(weight, grad)?,
            LayerKind::Conv2d {
                weight, stride, pad, ..
            } => tensor::conv2d_input_vjp(grad, weight, *stride, *pad, input.shape())?,
            LayerKind::Relu => tensor::mul(grad, &tensor::step(input)?)?,
            LayerKind::MaxPool2d { .. } => {
                let argmax = argmax.ok_or_else(|| {
                    NnError::TraceMismatch(format!("no argmax recorded for `{}`", self.name))
                })?;
                tensor::maxpool2d_vjp(grad, argmax, input.shape())?
            }
            LayerKind::AvgPool2d { window, stride } => {
                tensor::avgpool2d_vjp(grad, *window, *stride, input.shape())?
            }
            LayerKind::Flatten => grad.reshape(input.shape())?,
            LayerKind::BatchNorm {
                var, scale, eps, ..
            } => {
                let f = bn_factors(var, scale, *eps);
                per_channel(grad, |c, g| g * f[c])?
            }
        })
    }
}

/// Ordered feed-forward network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
}

/// Per-layer inputs and outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub inputs: Vec<Tensor>,
    pub outputs: Vec<Tensor>,
    pub argmax: Vec<Option<Vec<usize>>>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

impl Model {
    /// Builds a model, checking names and that consecutive layer shapes compose.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut names = HashSet::new();
        for l in &layers {
            if !names.insert(l.name.as_str()) {
                return Err(NnError::DuplicateName(l.name.clone()));
            }
        }
        let model = Model {
            input_shape,
            layers,
        };
        model.shapes()?;
        Ok(model)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut Vec<Layer> {
        &mut self.layers
    }

    /// Input extents of every layer followed by the final output extents.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for l in &self.layers {
            let next = l.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Vec<usize> {
        self.shapes()
            .ok()
            .and_then(|mut s| s.pop())
            .unwrap_or_default()
    }

    pub fn dtype(&self) -> DType {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|(_, t)| t.dtype())
            .next()
            .unwrap_or(DType::F32)
    }

    /// Runs the network, recording every layer's input and output.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(NnError::ShapeMismatch(format!(
                "model expects {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        let mut trace = ForwardTrace {
            inputs: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
            argmax: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.clone();
        for l in &self.layers {
            let out = l.forward(&cur)?;
            trace.inputs.push(cur);
            trace.argmax.push(out.argmax);
            trace.outputs.push(out.output.clone());
            cur = out.output;
        }
        Ok((cur, trace))
    }

    /// Forward pass without keeping the trace.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(NnError::ShapeMismatch(format!(
                "model expects {:?}, got {:?}",
                self.input_shape,
                x.shape()
            )));
        }
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.forward(&cur)?.output;
        }
        Ok(cur)
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        if trace.len() != self.layers.len()
            || trace.outputs.len() != self.layers.len()
            || trace.argmax.len() != self.layers.len()
        {
            return Err(NnError::TraceMismatch(format!(
                "{} trace entries for {} layers",
                trace.len(),
                self.layers.len()
            )));
        }
        for (i, (l, x)) in self.layers.iter().zip(&trace.inputs).enumerate() {
            let expected = l.output_shape(x.shape())?;
            if trace.outputs[i].shape() != expected.as_slice() {
                return Err(NnError::TraceMismatch(format!("layer `{}` output shape", l.name)));
            }
        }
        Ok(())
    }

    /// Exact reverse-mode gradient of `<output, grad_out>` with respect to the input.
    pub fn backward_vjp(&self, trace: &ForwardTrace, grad_out: &Tensor) -> Result<Tensor> {
        self.check_trace(trace)?;
        if let Some(last) = trace.outputs.last() {
            if last.shape() != grad_out.shape() {
                return Err(NnError::TraceMismatch(format!(
                    "grad_out {:?} vs output {:?}",
                    grad_out.shape(),
                    last.shape()
                )));
            }
        }
        let mut g = grad_out.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            g = l.input_vjp(&trace.inputs[i], trace.argmax[i].as_deref(), &g)?;
        }
        Ok(g)
    }
}

/// Fluent construction of sequential models with He-uniform initialisation.
#[derive(Clone, Debug)]
pub struct ModelBuilder {
    input_shape: Vec<usize>,
    dtype: DType,
    specs: Vec<Spec>,
}

#[derive(Clone, Debug)]
enum Spec {
    Linear(usize, bool),
    Conv(usize, usize, usize, usize, bool),
    Relu,
    MaxPool(usize),
    AvgPool(usize),
    Flatten,
}

impl ModelBuilder {
    pub fn new(input_shape: &[usize], dtype: DType) -> Self {
        ModelBuilder {
            input_shape: input_shape.to_vec(),
            dtype,
            specs: Vec::new(),
        }
    }

    pub fn linear(mut self, out: usize) -> Self {
        self.specs.push(Spec::Linear(out, true));
        self
    }

    /// Dense layer whose bias stays zero.
    pub fn linear_no_bias(mut self, out: usize) -> Self {
        self.specs.push(Spec::Linear(out, false));
        self
    }

    pub fn conv(mut self, out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        self.specs.push(Spec::Conv(out, kernel, stride, pad, true));
        self
    }

    pub fn conv_no_bias(mut self, out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        self.specs.push(Spec::Conv(out, kernel, stride, pad, false));
        self
    }

    pub fn relu(mut self) -> Self {
        self.specs.push(Spec::Relu);
        self
    }

    pub fn maxpool(mut self, size: usize) -> Self {
        self.specs.push(Spec::MaxPool(size));
        self
    }

    pub fn avgpool(mut self, size: usize) -> Self {
        self.specs.push(Spec::AvgPool(size));
        self
    }

    pub fn flatten(mut self) -> Self {
        self.specs.push(Spec::Flatten);
        self
    }

    /// Weights are He-uniform, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`. Biases are
    /// drawn from `U(-0.1, 0.1)` when enabled, since zero biases would hide bias
    /// handling in tests; training code may zero them.
    pub fn build(self, seed: u64) -> Result<Model> {
        let mut rng = rng::seeded(seed);
        let mut shape = self.input_shape.clone();
        let mut layers = Vec::new();
        let mut uniform = |n: usize, limit: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-limit..limit)).collect()
        };
        for (i, spec) in self.specs.iter().enumerate() {
            let kind = match *spec {
                Spec::Linear(out, with_bias) => {
                    let fan_in: usize = shape.iter().product();
                    let w = uniform(out * fan_in, (6.0 / fan_in as f64).sqrt());
                    let b = if with_bias { uniform(out, 0.1) } else { vec![0.0; out] };
                    LayerKind::Linear {
                        weight: Tensor::from_f64(&[out, fan_in], w)?.cast(self.dtype),
                        bias: Tensor::from_f64(&[out], b)?.cast(self.dtype),
                    }
                }
                Spec::Conv(out, k, s, p, with_bias) => {
                    let c = shape[0];
                    let fan_in = c * k * k;
                    let w = uniform(out * fan_in, (6.0 / fan_in as f64).sqrt());
                    let b = if with_bias { uniform(out, 0.1) } else { vec![0.0; out] };
                    LayerKind::Conv2d {
                        weight: Tensor::from_f64(&[out, c, k, k], w)?.cast(self.dtype),
                        bias: Tensor::from_f64(&[out], b)?.cast(self.dtype),
                        stride: (s, s),
                        pad: (p, p),
                    }
                }
                Spec::Relu => LayerKind::Relu,
                Spec::MaxPool(n) => LayerKind::MaxPool2d {
                    window: (n, n),
                    stride: (n, n),
                },
                Spec::AvgPool(n) => LayerKind::AvgPool2d {
                    window: (n, n),
                    stride: (n, n),
                },
                Spec::Flatten => LayerKind::Flatten,
            };
            let prefix = match spec {
                Spec::Linear(..) => "dense",
                Spec::Conv(..) => "conv",
                Spec::Relu => "relu",
                Spec::MaxPool(_) => "maxpool",
                Spec::AvgPool(_) => "avgpool",
                Spec::Flatten => "flatten",
            };
            let layer = Layer::new(format!("{prefix}{i}"), kind);
            shape = layer.output_shape(&shape)?;
            layers.push(layer);
        }
        Model::new(self.input_shape, layers)
    }
}
