use rand::Rng as _;

use super::graph::rows;
use super::{Result, SprayError};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    /// Relabelled so clusters are numbered in order of first appearance.
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centers: &[f64], d: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks(d.max(1)).enumerate() {
        let dist = sq_dist(x, center);
        if dist < best.1 {
            best = (c, dist);
        }
    }
    best
}

fn plus_plus(v: &[f64], n: usize, d: usize, k: usize, rng: &mut rng::Rng) -> Vec<f64> {
    let mut centers = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(&v[first * d..(first + 1) * d]);
    let mut closest: Vec<f64> = (0..n).map(|i| sq_dist(&v[i * d..(i + 1) * d], &centers)).collect();
    for _ in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in closest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = &v[pick * d..(pick + 1) * d];
        for (i, slot) in closest.iter_mut().enumerate() {
            *slot = slot.min(sq_dist(&v[i * d..(i + 1) * d], c));
        }
        centers.extend_from_slice(c);
    }
    centers
}

fn lloyd(v: &[f64], n: usize, d: usize, k: usize, mut centers: Vec<f64>, max_iter: usize) -> (Vec<usize>, f64) {
    let mut labels = vec![usize::MAX; n];
    let mut prev_inertia = f64::INFINITY;
    let mut inertia = f64::INFINITY;
    for _ in 0..max_iter {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, dist) = nearest(&v[i * d..(i + 1) * d], &centers, d);
            dists[i] = dist;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        inertia = dists.iter().sum();
        debug_assert!(
            inertia <= prev_inertia * (1.0 + 1e-12) + 1e-12,
            "inertia rose from {prev_inertia} to {inertia}"
        );
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for j in 0..d {
                sums[labels[i] * d + j] += v[i * d + j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        // Empty clusters take the point farthest from its centre.
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap();
                centers[c * d..(c + 1) * d].copy_from_slice(&v[far * d..(far + 1) * d]);
                dists[far] = 0.0;
                labels[far] = c;
            }
        }
        // Recomputed assignments can only lower the inertia below that of these centres.
        prev_inertia = (0..n)
            .map(|i| sq_dist(&v[i * d..(i + 1) * d], &centers[labels[i] * d..(labels[i] + 1) * d]))
            .sum();
    }
    (labels, inertia)
}

fn relabel(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// k-means++ seeding and Lloyd iterations; the lowest-inertia restart wins.
pub fn kmeans(x: &Tensor, k: usize, seed: u64, restarts: usize, max_iter: usize) -> Result<KMeansResult> {
    let (n, d, v) = rows(x)?;
    if k < 2 || k > n {
        return Err(SprayError::BadK { k, n });
    }
    let mut rng = rng::derived(seed, &format!("kmeans-{k}"));
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..restarts.max(1) {
        let centers = plus_plus(&v, n, d, k, &mut rng);
        let (labels, inertia) = lloyd(&v, n, d, k, centers, max_iter.max(1));
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((labels, inertia));
        }
    }
    let (labels, inertia) = best.unwrap();
    Ok(KMeansResult {
        labels: relabel(&labels),
        inertia,
    })
}
