//! Synthetic shapes with a planted watermark shortcut.
//!
//! Class 0 is "circle", 1 "square", 2 "triangle". A fraction of the class-0 samples
//! carry a 3x3 white block at (1,1) and draw their shape from all three classes, so
//! the label of those samples can only be read off the tag.

use rand::seq::SliceRandom;
use rand::Rng as _;

use relvis_core::rng;
use relvis_core::tensor::Tensor;

pub const CLASS_NAMES: [&str; 3] = ["circle", "square", "triangle"];
pub const IMAGE_SIZE: usize = 32;
/// Top-left corner and side of the watermark block.
pub const WATERMARK_AT: (usize, usize) = (1, 1);
pub const WATERMARK_SIZE: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub watermark_fraction: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_per_class: 200,
            watermark_fraction: 0.5,
            seed: 0,
        }
    }
}

pub struct Synth {
    /// N x 1 x 32 x 32, u8.
    pub data: Tensor,
    pub labels: Vec<i64>,
    /// 1 where the sample carries the watermark.
    pub watermark: Vec<u8>,
    /// Shape actually drawn, which differs from the label for watermarked samples.
    pub shape: Vec<u8>,
}

fn inside(shape: usize, r: f64, c: f64, cy: f64, cx: f64, rad: f64) -> bool {
    match shape {
        0 => (r - cy).powi(2) + (c - cx).powi(2) <= rad * rad,
        1 => (r - cy).abs() <= 0.85 * rad && (c - cx).abs() <= 0.85 * rad,
        _ => {
            let top = cy - rad;
            r >= top && r <= cy + rad && (c - cx).abs() <= (r - top) / 2.0
        }
    }
}

pub fn in_watermark(row: usize, col: usize) -> bool {
    let (r0, c0) = WATERMARK_AT;
    (r0..r0 + WATERMARK_SIZE).contains(&row) && (c0..c0 + WATERMARK_SIZE).contains(&col)
}

/// Renders one sample. Shapes stay clear of the watermark corner.
pub fn render(shape: usize, watermark: bool, rng: &mut rng::Rng) -> Vec<u8> {
    let n = IMAGE_SIZE;
    let cy = rng.random_range(12.0..20.0);
    let cx = rng.random_range(12.0..20.0);
    let rad = rng.random_range(5.0..8.0);
    let fg: u8 = rng.random_range(160..=255);
    let mut img = vec![0u8; n * n];
    for r in 0..n {
        for c in 0..n {
            let noise: u8 = rng.random_range(0..=40);
            img[r * n + c] = if inside(shape, r as f64, c as f64, cy, cx, rad) { fg } else { noise };
        }
    }
    if watermark {
        for r in 0..n {
            for c in 0..n {
                if in_watermark(r, c) {
                    img[r * n + c] = 255;
                }
            }
        }
    }
    img
}

pub fn generate(spec: &SynthSpec) -> Synth {
    let mut rng = rng::derived(spec.seed, "synth");
    let n_marked = (spec.watermark_fraction.clamp(0.0, 1.0) * spec.n_per_class as f64).round() as usize;
    let mut plan: Vec<(i64, usize, bool)> = Vec::new();
    for class in 0..CLASS_NAMES.len() {
        for i in 0..spec.n_per_class {
            let marked = class == 0 && i < n_marked;
            let shape = if marked { rng.random_range(0..CLASS_NAMES.len()) } else { class };
            plan.push((class as i64, shape, marked));
        }
    }
    plan.shuffle(&mut rng);
    let mut pixels = Vec::with_capacity(plan.len() * IMAGE_SIZE * IMAGE_SIZE);
    for &(_, shape, marked) in &plan {
        pixels.extend(render(shape, marked, &mut rng));
    }
    let n = plan.len();
    Synth {
        data: Tensor::from_u8(&[n, 1, IMAGE_SIZE, IMAGE_SIZE], pixels).expect("extents match"),
        labels: plan.iter().map(|p| p.0).collect(),
        watermark: plan.iter().map(|p| p.2 as u8).collect(),
        shape: plan.iter().map(|p| p.1 as u8).collect(),
    }
}
