//! Relevance heatmaps as 8-bit palette images.
//!
//! Relevance is summed over channels, scaled by its maximum magnitude into `[-1, 1]` and
//! mapped to a palette index. The colormap only decides the palette, so swapping it never
//! touches the index plane.

use super::{AttributionError, Result};
use crate::png::Image;
use crate::tensor::{DType, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Colormap {
    ColdNHot,
    Hot,
    Gray,
}

impl Colormap {
    pub const NAMES: [&'static str; 3] = ["coldnhot", "hot", "gray"];

    pub fn parse(name: &str) -> Result<Colormap> {
        match name {
            "coldnhot" => Ok(Colormap::ColdNHot),
            "hot" => Ok(Colormap::Hot),
            "gray" => Ok(Colormap::Gray),
            other => Err(AttributionError::UnknownColormap(other.into())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Colormap::ColdNHot => "coldnhot",
            Colormap::Hot => "hot",
            Colormap::Gray => "gray",
        }
    }

    fn anchors(self) -> &'static [(u8, [u8; 3])] {
        match self {
            Colormap::ColdNHot => &[
                (0, [0, 255, 255]),
                (64, [0, 0, 255]),
                (128, [0, 0, 0]),
                (192, [255, 0, 0]),
                (255, [255, 255, 0]),
            ],
            Colormap::Hot => &[
                (0, [0, 0, 0]),
                (96, [255, 0, 0]),
                (192, [255, 255, 0]),
                (255, [255, 255, 255]),
            ],
            Colormap::Gray => &[(0, [0, 0, 0]), (255, [255, 255, 255])],
        }
    }

    /// 256 entries, piecewise-linear between the anchors.
    pub fn palette(self) -> Vec<[u8; 3]> {
        let a = self.anchors();
        (0..=255u8)
            .map(|i| {
                let k = a.iter().rposition(|&(p, _)| p <= i).unwrap();
                let (p0, c0) = a[k];
                if p0 == i || k + 1 == a.len() {
                    return c0;
                }
                let (p1, c1) = a[k + 1];
                let f = (i - p0) as f64 / (p1 - p0) as f64;
                let mix = |u: u8, v: u8| (u as f64 + (v as f64 - u as f64) * f + 0.5).floor() as u8;
                [mix(c0[0], c1[0]), mix(c0[1], c1[1]), mix(c0[2], c1[2])]
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeatmapMode {
    Attribution,
    Overlay,
}

fn spatial(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [w] => Ok((1, 1, w)),
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(AttributionError::ShapeMismatch(format!(
            "expected HxW or CxHxW, got {s:?}"
        ))),
    }
}

/// Channel-summed relevance scaled into `[-1, 1]`, with its extents.
fn normalized(relevance: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = spatial(relevance)?;
    let v = relevance.to_f64_vec();
    let plane: Vec<f64> = (0..h * w)
        .map(|k| (0..c).map(|ch| v[ch * h * w + k]).sum())
        .collect();
    let peak = plane.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let norm = if peak > 0.0 {
        plane.iter().map(|x| x / peak).collect()
    } else {
        vec![0.0; plane.len()]
    };
    Ok((h, w, norm))
}

fn to_index(r: f64) -> u8 {
    ((r + 1.0) / 2.0 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// `round((r / max|r| + 1) / 2 * 255)` per pixel; all-zero relevance gives 128.
pub fn index_plane(relevance: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w, norm) = normalized(relevance)?;
    Ok((h, w, norm.into_iter().map(to_index).collect()))
}

/// Luminance in `[0, 1]`: u8 data is scaled by 1/255, float data is clamped.
fn luminance(base: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (c, h, w) = spatial(base)?;
    let scale = if base.dtype() == DType::U8 { 1.0 / 255.0 } else { 1.0 };
    let v: Vec<f64> = base
        .to_f64_vec()
        .into_iter()
        .map(|x| (x * scale).clamp(0.0, 1.0))
        .collect();
    let px = |ch: usize, k: usize| v[ch * h * w + k];
    let lum = (0..h * w)
        .map(|k| {
            if c >= 3 {
                0.299 * px(0, k) + 0.587 * px(1, k) + 0.114 * px(2, k)
            } else {
                px(0, k)
            }
        })
        .collect();
    Ok((h, w, lum))
}

fn lerp(a: [f64; 3], b: [f64; 3], f: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * f,
        a[1] + (b[1] - a[1]) * f,
        a[2] + (b[2] - a[2]) * f,
    ]
}

/// Overlay colour for coldnhot: red, yellow, white for positive relevance; blue to cyan
/// for negative.
fn overlay_color(r: f64) -> [f64; 3] {
    const RED: [f64; 3] = [255., 0., 0.];
    const YELLOW: [f64; 3] = [255., 255., 0.];
    const WHITE: [f64; 3] = [255., 255., 255.];
    const BLUE: [f64; 3] = [0., 0., 255.];
    const CYAN: [f64; 3] = [0., 255., 255.];
    if r >= 0.0 {
        if r <= 0.5 {
            lerp(RED, YELLOW, r * 2.0)
        } else {
            lerp(YELLOW, WHITE, r * 2.0 - 1.0)
        }
    } else {
        lerp(BLUE, CYAN, -r)
    }
}

/// Attribution mode yields a palette image. Overlay mode blends the colour onto the
/// gray base image with weight `|r_norm|` and yields RGB.
pub fn render_heatmap(
    relevance: &Tensor,
    colormap: Colormap,
    mode: HeatmapMode,
    base: Option<&Tensor>,
) -> Result<Image> {
    let (h, w, norm) = normalized(relevance)?;
    let palette = colormap.palette();
    match mode {
        HeatmapMode::Attribution => Ok(Image::Indexed {
            width: w as u32,
            height: h as u32,
            indices: norm.iter().map(|&r| to_index(r)).collect(),
            palette,
        }),
        HeatmapMode::Overlay => {
            let base = base.ok_or_else(|| {
                AttributionError::ShapeMismatch("overlay needs a base image".into())
            })?;
            let (bh, bw, lum) = luminance(base)?;
            if (bh, bw) != (h, w) {
                return Err(AttributionError::ShapeMismatch(format!(
                    "base image {bh}x{bw} vs relevance {h}x{w}"
                )));
            }
            let mut pixels = Vec::with_capacity(3 * h * w);
            for (&r, &g) in norm.iter().zip(&lum) {
                let color = match colormap {
                    Colormap::ColdNHot => overlay_color(r),
                    _ => palette[to_index(r) as usize].map(f64::from),
                };
                let gray = [g * 255.0; 3];
                let a = r.abs();
                for ch in 0..3 {
                    let v = gray[ch] * (1.0 - a) + color[ch] * a;
                    pixels.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
                }
            }
            Ok(Image::Rgb {
                width: w as u32,
                height: h as u32,
                pixels,
            })
        }
    }
}

/// A stored sample as an RGB image: one channel is gray, three are RGB.
pub fn render_input(sample: &Tensor) -> Result<Image> {
    let (c, h, w) = spatial(sample)?;
    let scale = if sample.dtype() == DType::U8 { 1.0 } else { 255.0 };
    let v = sample.to_f64_vec();
    let byte = |x: f64| (x * scale + 0.5).floor().clamp(0.0, 255.0) as u8;
    let mut pixels = Vec::with_capacity(3 * h * w);
    for k in 0..h * w {
        for ch in 0..3 {
            let src = if c >= 3 { ch } else { 0 };
            pixels.push(byte(v[src * h * w + k]));
        }
    }
    Ok(Image::Rgb {
        width: w as u32,
        height: h as u32,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coldnhot_anchors() {
        let p = Colormap::ColdNHot.palette();
        assert_eq!(p[0], [0, 255, 255]);
        assert_eq!(p[64], [0, 0, 255]);
        assert_eq!(p[128], [0, 0, 0]);
        assert_eq!(p[192], [255, 0, 0]);
        assert_eq!(p[255], [255, 255, 0]);
        assert_eq!(p[32], [0, 128, 255]);
    }

    #[test]
    fn zero_relevance_is_black_index_128() {
        let r = Tensor::zeros(DType::F32, &[1, 3, 3]);
        let img = render_heatmap(&r, Colormap::ColdNHot, HeatmapMode::Attribution, None).unwrap();
        let Image::Indexed { indices, .. } = &img else { panic!() };
        assert!(indices.iter().all(|&i| i == 128));
        assert_eq!(img.pixel(1, 1), [0, 0, 0]);
    }

    #[test]
    fn extremes_map_to_end_anchors() {
        let r = Tensor::from_f64(&[1, 3], vec![2.0, -4.0, 4.0]).unwrap();
        let img = render_heatmap(&r, Colormap::ColdNHot, HeatmapMode::Attribution, None).unwrap();
        assert_eq!(img.pixel(0, 2), [255, 255, 0]);
        assert_eq!(img.pixel(0, 1), [0, 255, 255]);
        let Image::Indexed { indices, .. } = img else { panic!() };
        // (0.5 + 1) / 2 * 255 = 191.25
        assert_eq!(indices[0], 191);
    }

    #[test]
    fn colormap_changes_only_palette() {
        let r = Tensor::from_f64(&[2, 2], vec![0.1, -0.7, 0.3, 1.0]).unwrap();
        let a = render_heatmap(&r, Colormap::ColdNHot, HeatmapMode::Attribution, None).unwrap();
        let b = render_heatmap(&r, Colormap::Gray, HeatmapMode::Attribution, None).unwrap();
        let (Image::Indexed { indices: ia, palette: pa, .. }, Image::Indexed { indices: ib, palette: pb, .. }) =
            (a, b)
        else {
            panic!()
        };
        assert_eq!(ia, ib);
        assert_ne!(pa, pb);
    }

    #[test]
    fn overlay_blends_on_gray() {
        let r = Tensor::from_f64(&[1, 3], vec![1.0, 0.0, -1.0]).unwrap();
        let base = Tensor::from_u8(&[1, 1, 3], vec![100, 100, 100]).unwrap();
        let img = render_heatmap(&r, Colormap::ColdNHot, HeatmapMode::Overlay, Some(&base)).unwrap();
        assert_eq!(img.pixel(0, 0), [255, 255, 255]);
        assert_eq!(img.pixel(0, 1), [100, 100, 100]);
        assert_eq!(img.pixel(0, 2), [0, 255, 255]);
        let small = Tensor::from_u8(&[1, 1, 2], vec![0, 0]).unwrap();
        assert!(render_heatmap(&r, Colormap::Hot, HeatmapMode::Overlay, Some(&small)).is_err());
    }
}
