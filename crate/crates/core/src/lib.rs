//! Dataset-wide model explanation toolkit.
//!
//! * [`tensor`]: dense tensors and numeric kernels.
//! * [`nn`]: feed-forward models, forward/backward passes, a small SGD trainer.
//! * [`attribution`]: relevance rules, composites, canonizers, attributors and heatmaps.
//! * [`pipeline`]: processors, tasks and a content-addressed result cache.
//! * [`spray`]: spectral relevance analysis (spectral embedding, k-means, t-SNE).
//! * [`store`]: on-disk tensor blobs, dataset/attribution/analysis stores, project manifests.

pub mod attribution;
pub mod nn;
pub mod pipeline;
pub mod png;
pub mod rng;
pub mod spray;
pub mod store;
pub mod tensor;

pub use tensor::{DType, Tensor};
