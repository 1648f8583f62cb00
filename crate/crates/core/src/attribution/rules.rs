use super::{AttributionError, Result};
use crate::nn::{linear, linear_input_vjp, Layer, LayerKind};
use crate::tensor::{self as t, Tensor};

/// Stabiliser for the box and alpha-beta quotients.
const QUOTIENT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum Rule {
    Epsilon { eps: f64 },
    Gamma { gamma: f64, eps: f64 },
    /// Bounds are rank-0, per-channel (`[C]`) or input-shaped.
    ZBox { low: Tensor, high: Tensor },
    AlphaBeta { alpha: f64, beta: f64 },
    ZPlus,
    Flat,
    WSquare,
    Pass,
    Norm,
    GuidedReLU,
    /// The layer's plain vector-Jacobian product.
    Gradient,
}

impl Rule {
    pub fn epsilon(eps: f64) -> Result<Rule> {
        if !(eps >= 0.0) {
            return Err(AttributionError::InvalidRule(format!("eps {eps} < 0")));
        }
        Ok(Rule::Epsilon { eps })
    }

    pub fn gamma(gamma: f64, eps: f64) -> Result<Rule> {
        if !(gamma >= 0.0) || !(eps >= 0.0) {
            return Err(AttributionError::InvalidRule(format!(
                "gamma {gamma} and eps {eps} must be >= 0"
            )));
        }
        Ok(Rule::Gamma { gamma, eps })
    }

    pub fn alpha_beta(alpha: f64, beta: f64) -> Result<Rule> {
        if !(alpha >= 0.0) || !(beta >= 0.0) || (alpha - beta - 1.0).abs() > 1e-12 {
            return Err(AttributionError::InvalidRule(format!(
                "alpha {alpha}, beta {beta}: need alpha - beta = 1, both >= 0"
            )));
        }
        Ok(Rule::AlphaBeta { alpha, beta })
    }

    pub fn zbox(low: Tensor, high: Tensor) -> Result<Rule> {
        let (l, h) = (low.to_f64_vec(), high.to_f64_vec());
        if low.shape() != high.shape() {
            return Err(AttributionError::InvalidBounds(format!(
                "low {:?} vs high {:?}",
                low.shape(),
                high.shape()
            )));
        }
        if l.iter().zip(&h).any(|(a, b)| !(a <= b)) {
            return Err(AttributionError::InvalidBounds("low must be <= high".into()));
        }
        Ok(Rule::ZBox {
            low: low.cast(crate::DType::F64),
            high: high.cast(crate::DType::F64),
        })
    }

    /// Scalar bounds.
    pub fn zbox_scalar(low: f64, high: f64) -> Result<Rule> {
        Rule::zbox(
            Tensor::scalar(crate::DType::F64, low),
            Tensor::scalar(crate::DType::F64, high),
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            Rule::Epsilon { .. } => "Epsilon",
            Rule::Gamma { .. } => "Gamma",
            Rule::ZBox { .. } => "ZBox",
            Rule::AlphaBeta { .. } => "AlphaBeta",
            Rule::ZPlus => "ZPlus",
            Rule::Flat => "Flat",
            Rule::WSquare => "WSquare",
            Rule::Pass => "Pass",
            Rule::Norm => "Norm",
            Rule::GuidedReLU => "GuidedReLU",
            Rule::Gradient => "Gradient",
        }
    }
}

fn unsupported<T>(layer: &Layer, rule: &Rule) -> Result<T> {
    Err(AttributionError::UnsupportedLayerForRule {
        layer: layer.name.clone(),
        kind: layer.kind.tag(),
        rule: rule.name(),
    })
}

/// An affine layer with replaceable parameters.
struct Affine<'a> {
    kind: &'a LayerKind,
    input_shape: &'a [usize],
}

impl Affine<'_> {
    fn forward(&self, w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor> {
        Ok(match self.kind {
            LayerKind::Conv2d { stride, pad, .. } => t::conv2d(x, w, b, *stride, *pad)?,
            _ => linear(w, x, b)?,
        })
    }

    /// `Wᵀ s`, shaped like the layer input.
    fn vjp(&self, w: &Tensor, s: &Tensor) -> Result<Tensor> {
        Ok(match self.kind {
            LayerKind::Conv2d { stride, pad, .. } => {
                t::conv2d_input_vjp(s, w, *stride, *pad, self.input_shape)?
            }
            _ => linear_input_vjp(w, s)?,
        })
    }

    /// Plain epsilon-style redistribution with modified parameters and input.
    fn epsilon(&self, w: &Tensor, b: &Tensor, x: &Tensor, r: &Tensor, eps: f64) -> Result<Tensor> {
        let z = self.forward(w, b, x)?;
        let s = t::div_stable(r, &z, eps)?;
        let c = self.vjp(w, &s)?;
        Ok(t::mul(x, &c)?)
    }
}

/// Broadcasts a rank-0, per-channel or input-shaped bound to `shape`.
fn expand_bound(bound: &Tensor, shape: &[usize], dtype: crate::DType) -> Result<Tensor> {
    let v = bound.to_f64_vec();
    let n: usize = shape.iter().product();
    let data = if bound.shape().is_empty() {
        vec![v[0]; n]
    } else if bound.shape() == shape {
        v
    } else if bound.ndim() == 1 && shape.first() == Some(&bound.len()) && !shape.is_empty() {
        let per = n / bound.len().max(1);
        (0..n).map(|i| v[i / per.max(1)]).collect()
    } else {
        return Err(AttributionError::ShapeMismatch(format!(
            "bound {:?} does not fit input {shape:?}",
            bound.shape()
        )));
    };
    Ok(Tensor::from_f64(shape, data)?.cast(dtype))
}

fn alpha_beta(
    aff: &Affine,
    w: &Tensor,
    b: &Tensor,
    x: &Tensor,
    r: &Tensor,
    alpha: f64,
    beta: f64,
) -> Result<Tensor> {
    let (wp, wn) = (t::pos(w)?, t::neg(w)?);
    let (xp, xn) = (t::pos(x)?, t::neg(x)?);
    let zero_b = Tensor::zeros(b.dtype(), b.shape());
    // Positive contributions: x⁺w⁺ + x⁻w⁻ (plus b⁺).
    let zp = t::add(&aff.forward(&wp, &t::pos(b)?, &xp)?, &aff.forward(&wn, &zero_b, &xn)?)?;
    let sp = t::div_stable(r, &zp, QUOTIENT_EPS)?;
    let rp = t::add(&t::mul(&xp, &aff.vjp(&wp, &sp)?)?, &t::mul(&xn, &aff.vjp(&wn, &sp)?)?)?;
    let mut out = t::scale(&rp, alpha)?;
    if beta != 0.0 {
        let zn = t::add(&aff.forward(&wn, &t::neg(b)?, &xp)?, &aff.forward(&wp, &zero_b, &xn)?)?;
        let sn = t::div_stable(r, &zn, QUOTIENT_EPS)?;
        let rn = t::add(&t::mul(&xp, &aff.vjp(&wn, &sn)?)?, &t::mul(&xn, &aff.vjp(&wp, &sn)?)?)?;
        out = t::sub(&out, &t::scale(&rn, beta)?)?;
    }
    Ok(out)
}

/// Redistributes `relevance` (shaped like the layer output) onto the layer input.
///
/// `argmax` is the forward pass's pooling record, needed by max-pool layers.
pub fn rule_backward(
    layer: &Layer,
    input: &Tensor,
    argmax: Option<&[usize]>,
    relevance: &Tensor,
    rule: &Rule,
) -> Result<Tensor> {
    let out_shape = layer.output_shape(input.shape())?;
    if relevance.shape() != out_shape.as_slice() {
        return Err(AttributionError::ShapeMismatch(format!(
            "relevance {:?} for layer `{}` with output {out_shape:?}",
            relevance.shape(),
            layer.name
        )));
    }
    let r = relevance;
    match rule {
        Rule::Pass => match layer.kind {
            LayerKind::Relu | LayerKind::Flatten | LayerKind::BatchNorm { .. } => {
                Ok(r.reshape(input.shape())?)
            }
            _ => unsupported(layer, rule),
        },
        Rule::Norm => match layer.kind {
            LayerKind::MaxPool2d { .. } | LayerKind::AvgPool2d { .. } => {
                Ok(layer.input_vjp(input, argmax, r)?)
            }
            LayerKind::Relu | LayerKind::Flatten | LayerKind::BatchNorm { .. } => {
                Ok(r.reshape(input.shape())?)
            }
            _ => unsupported(layer, rule),
        },
        Rule::GuidedReLU => match layer.kind {
            LayerKind::Relu => Ok(t::mul(&t::mul(r, &t::step(input)?)?, &t::step(r)?)?),
            _ => unsupported(layer, rule),
        },
        Rule::Gradient => Ok(layer.input_vjp(input, argmax, r)?),
        _ => {
            let (LayerKind::Linear { weight: w, bias: b } | LayerKind::Conv2d { weight: w, bias: b, .. }) =
                &layer.kind
            else {
                return unsupported(layer, rule);
            };
            let aff = Affine {
                kind: &layer.kind,
                input_shape: input.shape(),
            };
            match rule {
                Rule::Epsilon { eps } => aff.epsilon(w, b, input, r, *eps),
                Rule::Gamma { gamma, eps } => {
                    let wg = t::add(w, &t::scale(&t::pos(w)?, *gamma)?)?;
                    let bg = t::add(b, &t::scale(&t::pos(b)?, *gamma)?)?;
                    aff.epsilon(&wg, &bg, input, r, *eps)
                }
                Rule::ZBox { low, high } => {
                    let l = expand_bound(low, input.shape(), input.dtype())?;
                    let h = expand_bound(high, input.shape(), input.dtype())?;
                    let (wp, wn) = (t::pos(w)?, t::neg(w)?);
                    let z = t::sub(
                        &t::sub(&aff.forward(w, b, input)?, &aff.forward(&wp, &t::pos(b)?, &l)?)?,
                        &aff.forward(&wn, &t::neg(b)?, &h)?,
                    )?;
                    let s = t::div_stable(r, &z, QUOTIENT_EPS)?;
                    let full = t::mul(input, &aff.vjp(w, &s)?)?;
                    let lo = t::mul(&l, &aff.vjp(&wp, &s)?)?;
                    let hi = t::mul(&h, &aff.vjp(&wn, &s)?)?;
                    Ok(t::sub(&t::sub(&full, &lo)?, &hi)?)
                }
                Rule::AlphaBeta { alpha, beta } => alpha_beta(&aff, w, b, input, r, *alpha, *beta),
                Rule::ZPlus => alpha_beta(&aff, w, b, input, r, 1.0, 0.0),
                Rule::Flat => {
                    let ones_w = Tensor::ones(w.dtype(), w.shape());
                    let zero_b = Tensor::zeros(b.dtype(), b.shape());
                    let ones_x = Tensor::ones(input.dtype(), input.shape());
                    aff.epsilon(&ones_w, &zero_b, &ones_x, r, QUOTIENT_EPS)
                }
                Rule::WSquare => {
                    let ones_x = Tensor::ones(input.dtype(), input.shape());
                    aff.epsilon(&t::square(w)?, &t::square(b)?, &ones_x, r, QUOTIENT_EPS)
                }
                _ => unreachable!("non-affine rules handled above"),
            }
        }
    }
}
