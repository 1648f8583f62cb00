use rand_distr::{Distribution, StandardNormal};

use super::graph::rows;
use super::{Result, SprayError};
use crate::rng;
use crate::tensor::Tensor;

const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;
const LEARNING_RATE: f64 = 200.0;
const PERPLEXITY_TOL: f64 = 1e-5;
const PERPLEXITY_STEPS: usize = 50;
const MIN_GAIN: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct TsneResult {
    /// N x 2.
    pub embedding: Tensor,
    /// `kl[t]` is KL(P || Q) after `t` updates (un-exaggerated P).
    pub kl: Vec<f64>,
}

/// Conditional affinities `p_{j|i}` with per-point bandwidths matched to `perplexity`.
fn conditional_p(d2: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let row = &d2[i * n..(i + 1) * n];
        let (mut beta, mut lo, mut hi) = (1.0f64, f64::NEG_INFINITY, f64::INFINITY);
        let mut probs = vec![0.0; n];
        for _ in 0..PERPLEXITY_STEPS {
            let mut sum = 0.0;
            let mut dot = 0.0;
            for j in 0..n {
                probs[j] = if j == i { 0.0 } else { (-row[j] * beta).exp() };
                sum += probs[j];
                dot += row[j] * probs[j];
            }
            let sum = sum.max(1e-300);
            let entropy = sum.ln() + beta * dot / sum;
            for v in probs.iter_mut() {
                *v /= sum;
            }
            let diff = entropy - target;
            if diff.abs() < PERPLEXITY_TOL {
                break;
            }
            if diff > 0.0 {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = if lo.is_finite() { (beta + lo) / 2.0 } else { beta / 2.0 };
            }
        }
        p[i * n..(i + 1) * n].copy_from_slice(&probs);
    }
    p
}

fn kl_divergence(p: &[f64], num: &[f64], sum_num: f64) -> f64 {
    p.iter()
        .zip(num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &q)| pij * (pij / (q / sum_num).max(1e-12)).ln())
        .sum()
}

/// Exact t-SNE to two dimensions.
pub fn tsne(x: &Tensor, perplexity: f64, iters: usize, seed: u64) -> Result<TsneResult> {
    let (n, d, v) = rows(x)?;
    if !(perplexity > 0.0) || (n as f64) < 3.0 * perplexity + 1.0 {
        return Err(SprayError::PerplexityTooLarge { perplexity, n });
    }
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = (0..d).map(|k| (v[i * d + k] - v[j * d + k]).powi(2)).sum();
            d2[i * n + j] = s;
            d2[j * n + i] = s;
        }
    }
    let cond = conditional_p(&d2, n, perplexity);
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
            }
        }
    }

    let mut rng = rng::derived(seed, "tsne");
    let mut y: Vec<f64> = (0..2 * n)
        .map(|_| 1e-4 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
        .collect::<Vec<f64>>();
    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let mut num = vec![0.0; n * n];
    let mut kl = Vec::with_capacity(iters + 1);

    for it in 0..=iters {
        let mut sum_num = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                sum_num += 2.0 * q;
            }
        }
        kl.push(kl_divergence(&p, &num, sum_num));
        if it == iters {
            break;
        }
        let exaggeration = if it < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if it < EXAGGERATION_ITERS { 0.5 } else { 0.8 };
        for i in 0..n {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let m = (exaggeration * p[i * n + j] - q / sum_num) * q;
                gx += m * (y[2 * i] - y[2 * j]);
                gy += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
            for (c, g) in [(0, 4.0 * gx), (1, 4.0 * gy)] {
                let k = 2 * i + c;
                gains[k] = if (g > 0.0) != (update[k] > 0.0) {
                    gains[k] + 0.2
                } else {
                    (gains[k] * 0.8).max(MIN_GAIN)
                };
                update[k] = momentum * update[k] - LEARNING_RATE * gains[k] * g;
            }
        }
        for k in 0..2 * n {
            y[k] += update[k];
        }
        for c in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
            for i in 0..n {
                y[2 * i + c] -= mean;
            }
        }
    }
    Ok(TsneResult {
        embedding: Tensor::from_f64(&[n, 2], y)?,
        kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perplexity_bound() {
        let x = Tensor::zeros(crate::DType::F64, &[5, 2]);
        assert!(matches!(tsne(&x, 30.0, 10, 0), Err(SprayError::PerplexityTooLarge { .. })));
    }

    #[test]
    fn bandwidth_matches_perplexity() {
        let n = 30;
        let d2: Vec<f64> = (0..n * n)
            .map(|k| {
                let (i, j) = (k / n, k % n);
                ((i as f64 - j as f64) * 0.37).powi(2)
            })
            .collect();
        let p = conditional_p(&d2, n, 5.0);
        for i in 0..n {
            let h: f64 = p[i * n..(i + 1) * n]
                .iter()
                .filter(|&&v| v > 0.0)
                .map(|&v| -v * v.ln())
                .sum();
            assert!((h - 5f64.ln()).abs() < 1e-4, "row {i}: {h}");
        }
    }
}
