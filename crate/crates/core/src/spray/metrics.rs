use std::collections::{BTreeMap, BTreeSet};

use rand_distr::{Distribution, Normal};

use super::graph::rows;
use super::{Result, SprayError};
use crate::rng;
use crate::tensor::Tensor;

const LOGREG_ITERS: usize = 500;
const LOGREG_LR: f64 = 0.1;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Mean balanced training accuracy of one-vs-rest logistic regressions, one per cluster.
/// Features are standardised first.
pub fn separability_score(embedding: &Tensor, labels: &[usize], seed: u64) -> Result<f64> {
    let (n, d, mut v) = rows(embedding)?;
    if labels.len() != n {
        return Err(SprayError::ShapeMismatch(format!("{} labels for {n} rows", labels.len())));
    }
    let classes: BTreeSet<usize> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(SprayError::SingleCluster);
    }
    for j in 0..d {
        let mean = (0..n).map(|i| v[i * d + j]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (v[i * d + j] - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        for i in 0..n {
            v[i * d + j] = (v[i * d + j] - mean) / sd;
        }
    }
    let mut rng = rng::derived(seed, "separability");
    let init = Normal::new(0.0, 0.01).unwrap();
    let mut total = 0.0;
    for &c in &classes {
        let y: Vec<f64> = labels.iter().map(|&l| (l == c) as u8 as f64).collect();
        let mut w: Vec<f64> = (0..d).map(|_| init.sample(&mut rng)).collect();
        let mut b = 0.0;
        for _ in 0..LOGREG_ITERS {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for i in 0..n {
                let x = &v[i * d..(i + 1) * d];
                let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
                let e = sigmoid(z) - y[i];
                for j in 0..d {
                    gw[j] += e * x[j];
                }
                gb += e;
            }
            for j in 0..d {
                w[j] -= LOGREG_LR * gw[j] / n as f64;
            }
            b -= LOGREG_LR * gb / n as f64;
        }
        let (mut tp, mut tn, mut pos) = (0usize, 0usize, 0usize);
        for i in 0..n {
            let x = &v[i * d..(i + 1) * d];
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b;
            let pred = z > 0.0;
            if y[i] > 0.5 {
                pos += 1;
                tp += pred as usize;
            } else {
                tn += !pred as usize;
            }
        }
        let neg = n - pos;
        total += 0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64);
    }
    Ok(total / classes.len() as f64)
}

fn choose2(x: u64) -> f64 {
    (x * x.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index; 1.0 for identical partitions up to relabelling.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "partitions must cover the same samples");
    let n = a.len() as u64;
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, u64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = ra.values().map(|&c| choose2(c)).sum();
    let sb: f64 = rb.values().map(|&c| choose2(c)).sum();
    let expected = sa * sb / choose2(n).max(1.0);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
