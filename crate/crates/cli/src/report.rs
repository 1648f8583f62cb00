//! Does some clustering isolate the watermarked samples, and is their relevance on the tag?

use serde_json::{json, Value};

use relvis_core::store::{AttributionStore, CategoryAnalysis};

use crate::synth::in_watermark;
use crate::Result;

pub const MIN_COVERAGE: f64 = 0.8;
pub const MIN_PURITY: f64 = 0.8;
pub const MIN_TAG_RATIO: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkReport {
    pub category: String,
    pub clustering: String,
    pub cluster: i64,
    pub cluster_size: usize,
    /// Share of all watermarked samples that fall in the cluster.
    pub coverage: f64,
    /// Share of the cluster that is watermarked.
    pub purity: f64,
    /// Mean |R| per tag pixel over mean |R| per image pixel, across the cluster.
    pub tag_ratio: f64,
}

impl WatermarkReport {
    pub fn isolates(&self) -> bool {
        self.coverage >= MIN_COVERAGE && self.purity >= MIN_PURITY
    }

    pub fn passes(&self) -> bool {
        self.isolates() && self.tag_ratio >= MIN_TAG_RATIO
    }

    fn score(&self) -> f64 {
        self.coverage.min(self.purity)
    }

    pub fn better_than(&self, other: &WatermarkReport) -> bool {
        (self.passes(), self.isolates(), self.score()) > (other.passes(), other.isolates(), other.score())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "category": self.category,
            "clustering": self.clustering,
            "cluster": self.cluster,
            "cluster_size": self.cluster_size,
            "coverage": self.coverage,
            "purity": self.purity,
            "tag_ratio": self.tag_ratio,
            "thresholds": { "coverage": MIN_COVERAGE, "purity": MIN_PURITY, "tag_ratio": MIN_TAG_RATIO },
            "passes": self.passes(),
        })
    }
}

/// Ratio of per-pixel mean |R| inside the tag to per-pixel mean |R| over the image.
pub fn tag_ratio(attr: &AttributionStore, samples: &[usize]) -> Result<f64> {
    let (mut tag, mut all) = (0.0, 0.0);
    let (mut n_tag, mut n_all) = (0usize, 0usize);
    for &i in samples {
        let r = attr.sample(i)?;
        let shape = r.shape().to_vec();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let v = r.to_f64_vec();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let a = v[(ch * h + y) * w + x].abs();
                    all += a;
                    n_all += 1;
                    if in_watermark(y, x) {
                        tag += a;
                        n_tag += 1;
                    }
                }
            }
        }
    }
    if n_tag == 0 || all == 0.0 {
        return Ok(0.0);
    }
    Ok((tag / n_tag as f64) / (all / n_all as f64))
}

/// Best cluster of `analysis` with respect to the watermark mask (dataset-indexed).
/// `None` when the dataset has no watermarked samples.
pub fn watermark_report(
    attr: &AttributionStore,
    analysis: &CategoryAnalysis,
    mask: &[bool],
    category: &str,
) -> Result<Option<WatermarkReport>> {
    let total = mask.iter().filter(|&&m| m).count();
    if total == 0 {
        return Ok(None);
    }
    let mut best: Option<WatermarkReport> = None;
    for (name, c) in &analysis.clusterings {
        let k = c.labels.iter().copied().max().unwrap_or(-1) + 1;
        for cluster in 0..k {
            let members: Vec<usize> = c
                .labels
                .iter()
                .zip(&analysis.index)
                .filter(|(&l, _)| l == cluster)
                .map(|(_, &i)| i)
                .collect();
            if members.is_empty() {
                continue;
            }
            let marked = members.iter().filter(|&&i| mask.get(i).copied().unwrap_or(false)).count();
            let mut r = WatermarkReport {
                category: category.into(),
                clustering: name.clone(),
                cluster,
                cluster_size: members.len(),
                coverage: marked as f64 / total as f64,
                purity: marked as f64 / members.len() as f64,
                tag_ratio: 0.0,
            };
            if best.as_ref().is_some_and(|b| !r.isolates() && r.score() <= b.score()) {
                continue;
            }
            r.tag_ratio = tag_ratio(attr, &members)?;
            if best.as_ref().is_none_or(|b| r.better_than(b)) {
                best = Some(r);
            }
        }
    }
    Ok(best)
}
