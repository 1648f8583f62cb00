use super::{Result, SprayError};
use crate::tensor::Tensor;

const OFF_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Eigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// N x m, one eigenvector per column.
    pub vectors: Tensor,
}

fn off_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Full decomposition by cyclic Jacobi rotations. Returns (values, row-major V with
/// eigenvectors in columns), unsorted.
pub(crate) fn jacobi(mut a: Vec<f64>, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let mut sweeps = 0;
    while off_norm(&a, n) >= OFF_TOL {
        if sweeps == MAX_SWEEPS {
            return Err(SprayError::NoConvergence(sweeps));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let (app, aqq) = (a[p * n + p], a[q * n + q]);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Ok(((0..n).map(|i| a[i * n + i]).collect(), v))
}

/// The `m` smallest eigenpairs, ascending, each vector signed so its largest-magnitude
/// component is positive.
pub fn eig_smallest(l: &Tensor, m: usize) -> Result<Eigen> {
    let n = match *l.shape() {
        [a, b] if a == b => a,
        ref s => return Err(SprayError::NotSymmetric(format!("shape {s:?}"))),
    };
    if m > n {
        return Err(SprayError::TooFewSamples { need: m, have: n });
    }
    let a = l.to_f64_vec();
    for i in 0..n {
        for j in i + 1..n {
            let (x, y) = (a[i * n + j], a[j * n + i]);
            if (x - y).abs() > 1e-12 * (1.0 + x.abs().max(y.abs())) {
                return Err(SprayError::NotSymmetric(format!("l[{i},{j}]={x} vs l[{j},{i}]={y}")));
            }
        }
    }
    let (vals, v) = jacobi(a, n)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| vals[x].total_cmp(&vals[y]).then(x.cmp(&y)));
    let mut out = vec![0.0; n * m];
    let mut values = Vec::with_capacity(m);
    for (c, &col) in order.iter().take(m).enumerate() {
        values.push(vals[col]);
        let mut big = 0;
        for r in 0..n {
            if v[r * n + col].abs() > v[big * n + col].abs() {
                big = r;
            }
        }
        let sign = if v[big * n + col] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            out[r * m + c] = sign * v[r * n + col];
        }
    }
    Ok(Eigen {
        values,
        vectors: Tensor::from_f64(&[n, m], out)?,
    })
}
