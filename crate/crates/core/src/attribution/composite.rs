use std::fmt;
use std::sync::Arc;

use super::{rule_backward, AttributionError, Canonizer, CanonizerState, Result, Rule};
use crate::nn::{LayerKind, Model};
use crate::tensor::Tensor;

/// What a matcher sees of a layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerContext<'a> {
    pub index: usize,
    pub name: &'a str,
    pub kind: &'a LayerKind,
    /// This is the first linear or convolutional layer of the model.
    pub first_affine: bool,
}

#[derive(Clone)]
pub enum Matcher {
    Any,
    /// Layer kind tag, e.g. `"Conv2D"`.
    Kind(&'static str),
    /// Linear or convolutional.
    Affine,
    FirstAffine,
    Pool,
    Name(String),
    Position(usize),
    All(Vec<Matcher>),
    Not(Box<Matcher>),
    Custom(Arc<dyn Fn(&LayerContext) -> bool + Send + Sync>),
}

impl fmt::Debug for Matcher {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Matcher::Any => write!(f, "Any"),
            Matcher::Kind(k) => write!(f, "Kind({k})"),
            Matcher::Affine => write!(f, "Affine"),
            Matcher::FirstAffine => write!(f, "FirstAffine"),
            Matcher::Pool => write!(f, "Pool"),
            Matcher::Name(n) => write!(f, "Name({n})"),
            Matcher::Position(p) => write!(f, "Position({p})"),
            Matcher::All(v) => f.debug_tuple("All").field(v).finish(),
            Matcher::Not(m) => f.debug_tuple("Not").field(m).finish(),
            Matcher::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl Matcher {
    pub fn matches(&self, ctx: &LayerContext) -> bool {
        match self {
            Matcher::Any => true,
            Matcher::Kind(k) => ctx.kind.tag() == *k,
            Matcher::Affine => ctx.kind.is_affine(),
            Matcher::FirstAffine => ctx.first_affine,
            Matcher::Pool => matches!(
                ctx.kind,
                LayerKind::MaxPool2d { .. } | LayerKind::AvgPool2d { .. }
            ),
            Matcher::Name(n) => ctx.name == n,
            Matcher::Position(p) => ctx.index == *p,
            Matcher::All(ms) => ms.iter().all(|m| m.matches(ctx)),
            Matcher::Not(m) => !m.matches(ctx),
            Matcher::Custom(f) => f(ctx),
        }
    }
}

/// Ordered layer-to-rule mapping; the first matching entry wins.
#[derive(Clone, Debug, Default)]
pub struct Composite {
    pub module_map: Vec<(Matcher, Rule)>,
    pub canonizers: Vec<Canonizer>,
}

impl Composite {
    pub fn new(module_map: Vec<(Matcher, Rule)>, canonizers: Vec<Canonizer>) -> Self {
        Composite {
            module_map,
            canonizers,
        }
    }

    /// One rule per layer. Layers no entry matches fall back to `Pass` (activations,
    /// flatten), `Norm` (pooling), or fail.
    pub fn resolve(&self, model: &Model) -> Result<Vec<Rule>> {
        let first = model.layers().iter().position(|l| l.kind.is_affine());
        model
            .layers()
            .iter()
            .enumerate()
            .map(|(index, layer)| {
                let ctx = LayerContext {
                    index,
                    name: &layer.name,
                    kind: &layer.kind,
                    first_affine: Some(index) == first,
                };
                if let Some((_, rule)) = self.module_map.iter().find(|(m, _)| m.matches(&ctx)) {
                    return Ok(rule.clone());
                }
                match layer.kind {
                    LayerKind::Relu | LayerKind::Flatten => Ok(Rule::Pass),
                    LayerKind::MaxPool2d { .. } | LayerKind::AvgPool2d { .. } => Ok(Rule::Norm),
                    _ => Err(AttributionError::UnmappedLayer(layer.name.clone())),
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositeParams {
    pub low: f64,
    pub high: f64,
    pub gamma: f64,
    pub eps: f64,
}

impl Default for CompositeParams {
    fn default() -> Self {
        CompositeParams {
            low: -3.0,
            high: 3.0,
            gamma: 0.25,
            eps: 1e-6,
        }
    }
}

/// Box rule on the first linear/conv layer, gamma on other convolutions, epsilon on
/// dense layers.
pub fn composite_epsilon_gamma_box(
    low: f64,
    high: f64,
    gamma: f64,
    eps: f64,
    canonizers: Vec<Canonizer>,
) -> Result<Composite> {
    if !(low < high) {
        return Err(AttributionError::InvalidBounds(format!(
            "low {low} must be below high {high}"
        )));
    }
    Ok(Composite::new(
        vec![
            (Matcher::FirstAffine, Rule::zbox_scalar(low, high)?),
            (Matcher::Kind("Conv2D"), Rule::gamma(gamma, eps)?),
            (Matcher::Kind("Linear"), Rule::epsilon(eps)?),
            (Matcher::Kind("ReLU"), Rule::Pass),
            (Matcher::Kind("Flatten"), Rule::Pass),
            (Matcher::Pool, Rule::Norm),
        ],
        canonizers,
    ))
}

pub const COMPOSITE_NAMES: [&str; 6] = [
    "epsilon-gamma-box",
    "epsilon",
    "epsilon-plus",
    "epsilon-alpha2-beta1",
    "excitation-backprop",
    "guided-backprop",
];

/// Named composites. All of them merge batch norms first.
pub fn composite_by_name(name: &str, p: &CompositeParams) -> Result<Composite> {
    let canon = vec![Canonizer::MergeBatchNorm];
    let conv_then_eps = |conv: Rule| -> Result<Composite> {
        Ok(Composite::new(
            vec![
                (Matcher::Kind("Conv2D"), conv),
                (Matcher::Kind("Linear"), Rule::epsilon(p.eps)?),
            ],
            canon.clone(),
        ))
    };
    match name {
        "epsilon-gamma-box" => composite_epsilon_gamma_box(p.low, p.high, p.gamma, p.eps, canon),
        "epsilon" => Ok(Composite::new(
            vec![(Matcher::Affine, Rule::epsilon(p.eps)?)],
            canon,
        )),
        "epsilon-plus" => conv_then_eps(Rule::ZPlus),
        "epsilon-alpha2-beta1" => conv_then_eps(Rule::alpha_beta(2.0, 1.0)?),
        "excitation-backprop" => Ok(Composite::new(vec![(Matcher::Affine, Rule::ZPlus)], canon)),
        "guided-backprop" => Ok(Composite::new(
            vec![
                (Matcher::Kind("ReLU"), Rule::GuidedReLU),
                (Matcher::Any, Rule::Gradient),
            ],
            canon,
        )),
        other => Err(AttributionError::UnknownComposite(other.into())),
    }
}

/// A canonized private model copy with its resolved rules. Without rules, the backward
/// pass is the plain gradient.
#[derive(Clone, Debug)]
pub struct RuleAssignment {
    model: Model,
    rules: Option<Vec<Rule>>,
    states: Vec<CanonizerState>,
}

/// Applies the composite's canonizers to a copy of `model`, then resolves its rules.
pub fn register(model: &Model, composite: &Composite) -> Result<RuleAssignment> {
    let mut copy = model.clone();
    let mut states = Vec::new();
    for c in &composite.canonizers {
        states.push(c.apply(&mut copy)?);
    }
    let rules = composite.resolve(&copy)?;
    Ok(RuleAssignment {
        model: copy,
        rules: Some(rules),
        states,
    })
}

impl RuleAssignment {
    /// Plain gradient backward on an unmodified copy.
    pub fn gradient(model: &Model) -> Self {
        RuleAssignment {
            model: model.clone(),
            rules: None,
            states: Vec::new(),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn rules(&self) -> Option<&[Rule]> {
        self.rules.as_deref()
    }

    /// Undoes every canonizer and returns the original model.
    pub fn remove(self) -> Model {
        let mut m = self.model;
        for s in self.states.into_iter().rev() {
            s.restore(&mut m);
        }
        m
    }

    /// Model output and the relevance at every layer boundary: entry 0 is the input
    /// relevance, the last entry is `r_out`.
    pub fn attribute_layers(&self, x: &Tensor, r_out: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (out, trace) = self.model.forward(x)?;
        if r_out.shape() != out.shape() {
            return Err(AttributionError::ShapeMismatch(format!(
                "relevance at output {:?} vs model output {:?}",
                r_out.shape(),
                out.shape()
            )));
        }
        let r_out = r_out.cast(out.dtype());
        let n = self.model.layers().len();
        let mut rel = vec![r_out.clone(); n + 1];
        let mut r = r_out;
        for (i, layer) in self.model.layers().iter().enumerate().rev() {
            let argmax = trace.argmax[i].as_deref();
            r = match &self.rules {
                Some(rules) => rule_backward(layer, &trace.inputs[i], argmax, &r, &rules[i])?,
                None => layer.input_vjp(&trace.inputs[i], argmax, &r)?,
            };
            rel[i] = r.clone();
        }
        Ok((out, rel))
    }

    /// Model output and input relevance.
    pub fn attribute(&self, x: &Tensor, r_out: &Tensor) -> Result<(Tensor, Tensor)> {
        let (out, trace) = self.model.forward(x)?;
        if r_out.shape() != out.shape() {
            return Err(AttributionError::ShapeMismatch(format!(
                "relevance at output {:?} vs model output {:?}",
                r_out.shape(),
                out.shape()
            )));
        }
        let mut r = r_out.cast(out.dtype());
        for (i, layer) in self.model.layers().iter().enumerate().rev() {
            let argmax = trace.argmax[i].as_deref();
            r = match &self.rules {
                Some(rules) => rule_backward(layer, &trace.inputs[i], argmax, &r, &rules[i])?,
                None => layer.input_vjp(&trace.inputs[i], argmax, &r)?,
            };
        }
        Ok((out, r))
    }
}
