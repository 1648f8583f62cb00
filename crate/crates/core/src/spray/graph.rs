use super::{Result, SprayError};
use crate::tensor::Tensor;

/// Rows of a 2-D tensor (or any tensor flattened after its first axis) as `f64`.
pub(crate) fn rows(x: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let n = *x
        .shape()
        .first()
        .ok_or_else(|| SprayError::ShapeMismatch("expected at least one axis".into()))?;
    let d = if n == 0 { 0 } else { x.len() / n };
    Ok((n, d, x.to_f64_vec()))
}

fn square(t: &Tensor, what: &str) -> Result<(usize, Vec<f64>)> {
    match *t.shape() {
        [a, b] if a == b => Ok((a, t.to_f64_vec())),
        ref s => Err(SprayError::ShapeMismatch(format!("{what} must be square, got {s:?}"))),
    }
}

/// Euclidean distances between the rows of `x` (N x D, or N x ... flattened).
pub fn pairwise_distances(x: &Tensor) -> Result<Tensor> {
    let (n, d, v) = rows(x)?;
    if n == 0 {
        return Err(SprayError::ShapeMismatch("no samples".into()));
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = (0..d)
                .map(|k| {
                    let diff = v[i * d + k] - v[j * d + k];
                    diff * diff
                })
                .sum();
            out[i * n + j] = s.sqrt();
            out[j * n + i] = out[i * n + j];
        }
    }
    Ok(Tensor::from_f64(&[n, n], out)?)
}

/// Binary k-nearest-neighbour graph, symmetrised with `max(W, Wᵀ)`. Ties go to the lower
/// index; the point itself is never its own neighbour.
pub fn knn_affinity(dist: &Tensor, k: usize) -> Result<Tensor> {
    let (n, d) = square(dist, "distance matrix")?;
    if k == 0 || k >= n {
        return Err(SprayError::BadK { k, n });
    }
    let mut w = vec![0.0; n * n];
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        order.sort_by(|&a, &b| d[i * n + a].total_cmp(&d[i * n + b]).then(a.cmp(&b)));
        for &j in &order[..k] {
            w[i * n + j] = 1.0;
            w[j * n + i] = 1.0;
        }
    }
    Ok(Tensor::from_f64(&[n, n], w)?)
}

/// `I - D^{-1/2} W D^{-1/2}`; isolated vertices get a zero row and column.
pub fn normalized_laplacian(w: &Tensor) -> Result<Tensor> {
    let (n, v) = square(w, "affinity")?;
    for i in 0..n {
        for j in 0..n {
            let (a, b) = (v[i * n + j], v[j * n + i]);
            if a != b {
                return Err(SprayError::AsymmetricInput(format!("w[{i},{j}]={a} but w[{j},{i}]={b}")));
            }
            if a < 0.0 {
                return Err(SprayError::AsymmetricInput(format!("negative weight at [{i},{j}]")));
            }
        }
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| {
            let deg: f64 = v[i * n..(i + 1) * n].iter().sum();
            if deg > 0.0 {
                1.0 / deg.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let id = if i == j && inv_sqrt[i] > 0.0 { 1.0 } else { 0.0 };
            l[i * n + j] = id - inv_sqrt[i] * v[i * n + j] * inv_sqrt[j];
        }
    }
    Ok(Tensor::from_f64(&[n, n], l)?)
}
