//! A small shape classifier with relevance heatmaps, exported to JavaScript.
//!
//! [`Classifier`] holds everything natively testable; [`Demo`] is its wasm-bindgen face.

use rand::Rng as _;
use wasm_bindgen::prelude::*;

use relvis_core::attribution::{
    composite_by_name, register, render_heatmap, AttributionError, Colormap, CompositeParams, HeatmapMode,
};
use relvis_core::nn::{train_sgd, Model, ModelBuilder, NnError, TrainConfig};
use relvis_core::png::Image;
use relvis_core::rng;
use relvis_core::tensor::{DType, Tensor, TensorError};

pub const SIDE: usize = 16;
pub const CLASSES: [&str; 3] = ["circle", "square", "triangle"];

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("expected {want} pixels, got {got}")]
    BadInput { want: usize, got: usize },
    #[error("class {0} out of range")]
    BadClass(usize),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DemoError>;

/// One shape in `[0, 1]` on a dark, slightly noisy background.
pub fn draw_shape(class: usize, seed: u64) -> Result<Vec<f32>> {
    if class >= CLASSES.len() {
        return Err(DemoError::BadClass(class));
    }
    let mut rng = rng::derived(seed, "demo-shape");
    let cy: f64 = rng.random_range(6.0..10.0);
    let cx: f64 = rng.random_range(6.0..10.0);
    let rad: f64 = rng.random_range(3.0..5.0);
    let mut img = Vec::with_capacity(SIDE * SIDE);
    for r in 0..SIDE {
        for c in 0..SIDE {
            let (y, x) = (r as f64, c as f64);
            let on = match class {
                0 => (y - cy).powi(2) + (x - cx).powi(2) <= rad * rad,
                1 => (y - cy).abs() <= 0.85 * rad && (x - cx).abs() <= 0.85 * rad,
                _ => y >= cy - rad && y <= cy + rad && (x - cx).abs() <= (y - cy + rad) / 2.0,
            };
            img.push(if on { 0.9 } else { rng.random_range(0.0..0.15) });
        }
    }
    Ok(img)
}

pub struct Classifier {
    model: Model,
    pub train_accuracy: f64,
}

impl Classifier {
    /// Trains on `per_class` shapes of each class.
    pub fn train(seed: u64, per_class: usize, epochs: usize) -> Result<Self> {
        let model = ModelBuilder::new(&[1, SIDE, SIDE], DType::F32)
            .conv(4, 3, 1, 1)
            .relu()
            .maxpool(2)
            .flatten()
            .linear(3)
            .build(seed)?;
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..per_class {
            for class in 0..CLASSES.len() {
                pixels.extend(draw_shape(class, seed ^ ((i * CLASSES.len() + class) as u64 + 1) << 8)?);
                labels.push(class);
            }
        }
        let x = Tensor::from_f32(&[labels.len(), 1, SIDE, SIDE], pixels)?;
        let cfg = TrainConfig {
            epochs,
            lr: 0.05,
            seed,
            target_accuracy: Some(1.0),
            ..Default::default()
        };
        let (model, report) = train_sgd(&model, &x, &labels, &cfg)?;
        Ok(Classifier {
            model,
            train_accuracy: report.accuracy,
        })
    }

    fn input(&self, pixels: &[f32]) -> Result<Tensor> {
        if pixels.len() != SIDE * SIDE {
            return Err(DemoError::BadInput {
                want: SIDE * SIDE,
                got: pixels.len(),
            });
        }
        Ok(Tensor::from_f32(&[1, SIDE, SIDE], pixels.to_vec())?)
    }

    fn relevance_seed(&self, logits: &Tensor, class: usize) -> Result<Tensor> {
        if class >= CLASSES.len() {
            return Err(DemoError::BadClass(class));
        }
        let mut onehot = vec![0.0; CLASSES.len()];
        onehot[class] = 1.0;
        Ok(Tensor::from_f64(logits.shape(), onehot)?.cast(DType::F32))
    }

    pub fn predict(&self, pixels: &[f32]) -> Result<Vec<f32>> {
        let out = self.model.predict(&self.input(pixels)?)?;
        Ok(out.to_f64_vec().into_iter().map(|v| v as f32).collect())
    }

    /// Input relevance for `class` under a named composite.
    pub fn relevance(&self, pixels: &[f32], composite: &str, class: usize) -> Result<Vec<f64>> {
        let x = self.input(pixels)?;
        let assigned = register(&self.model, &composite_by_name(composite, &CompositeParams::default())?)?;
        let r_out = self.relevance_seed(&self.model.predict(&x)?, class)?;
        let (_, rel) = assigned.attribute(&x, &r_out)?;
        Ok(rel.to_f64_vec())
    }

    /// Heatmap of [`Classifier::relevance`] as RGBA bytes, ready for a canvas `ImageData`.
    pub fn heatmap_rgba(&self, pixels: &[f32], composite: &str, class: usize, colormap: &str) -> Result<Vec<u8>> {
        let rel = Tensor::from_f64(&[SIDE, SIDE], self.relevance(pixels, composite, class)?)?;
        let img = render_heatmap(&rel, Colormap::parse(colormap)?, HeatmapMode::Attribution, None)?;
        Ok(rgba(&img))
    }

    /// Summed relevance after each layer, input first, output last.
    pub fn layer_sums(&self, pixels: &[f32], composite: &str, class: usize) -> Result<Vec<f64>> {
        let x = self.input(pixels)?;
        let assigned = register(&self.model, &composite_by_name(composite, &CompositeParams::default())?)?;
        let r_out = self.relevance_seed(&self.model.predict(&x)?, class)?;
        let (_, layers) = assigned.attribute_layers(&x, &r_out)?;
        Ok(layers.iter().map(|t| t.to_f64_vec().iter().sum()).collect())
    }
}

fn rgba(img: &Image) -> Vec<u8> {
    let (w, h) = img.dimensions();
    let mut out = Vec::with_capacity((4 * w * h) as usize);
    for r in 0..h {
        for c in 0..w {
            out.extend(img.pixel(r, c));
            out.push(255);
        }
    }
    out
}

fn js(e: DemoError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(Classifier);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> std::result::Result<Demo, JsError> {
        Classifier::train(seed, 40, 20).map(Demo).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn accuracy(&self) -> f64 {
        self.0.train_accuracy
    }

    pub fn sample(class: usize, seed: u64) -> std::result::Result<Vec<f32>, JsError> {
        draw_shape(class, seed).map_err(js)
    }

    pub fn predict(&self, pixels: &[f32]) -> std::result::Result<Vec<f32>, JsError> {
        self.0.predict(pixels).map_err(js)
    }

    pub fn heatmap(&self, pixels: &[f32], composite: &str, class: usize, colormap: &str) -> std::result::Result<Vec<u8>, JsError> {
        self.0.heatmap_rgba(pixels, composite, class, colormap).map_err(js)
    }

    #[wasm_bindgen(js_name = layerSums)]
    pub fn layer_sums(&self, pixels: &[f32], composite: &str, class: usize) -> std::result::Result<Vec<f64>, JsError> {
        self.0.layer_sums(pixels, composite, class).map_err(js)
    }
}
