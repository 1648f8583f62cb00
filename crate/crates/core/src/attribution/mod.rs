//! Rule-based relevance attribution.
//!
//! A [`Composite`] maps layers to [`Rule`]s and lists [`Canonizer`]s. Registering it on a
//! model yields a [`RuleAssignment`] (a canonized private copy plus one rule per layer)
//! whose backward pass walks the forward trace in reverse, applying [`rule_backward`].

mod attributors;
mod canonizer;
mod composite;
mod heatmap;
mod rules;

pub use attributors::{
    attribute_gradient, attribute_integrated_gradients, attribute_occlusion, attribute_smoothgrad,
    AttributionResult, OcclusionConfig,
};
pub use canonizer::{canonize_merge_batchnorm, Canonizer, CanonizerState};
pub use composite::{
    composite_by_name, composite_epsilon_gamma_box, register, Composite, CompositeParams,
    LayerContext, Matcher, RuleAssignment, COMPOSITE_NAMES,
};
pub use heatmap::{index_plane, render_heatmap, render_input, Colormap, HeatmapMode};
pub use rules::{rule_backward, Rule};

use crate::nn::NnError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum AttributionError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("rule {rule} cannot be applied to layer `{layer}` ({kind})")]
    UnsupportedLayerForRule {
        layer: String,
        kind: &'static str,
        rule: &'static str,
    },
    #[error("no rule matches layer `{0}`")]
    UnmappedLayer(String),
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error("invalid rule parameters: {0}")]
    InvalidRule(String),
    #[error("batch norm `{0}` does not follow a linear or convolutional layer")]
    OrphanBatchNorm(String),
    #[error("unknown composite `{0}`")]
    UnknownComposite(String),
    #[error("unknown colormap `{0}`")]
    UnknownColormap(String),
}

pub type Result<T> = std::result::Result<T, AttributionError>;
