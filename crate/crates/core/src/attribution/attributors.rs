use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::{register, AttributionError, Composite, Result, RuleAssignment};
use crate::nn::Model;
use crate::rng;
use crate::tensor::{self as t, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionResult {
    /// Model output at the unperturbed input.
    pub output: Tensor,
    /// Input-shaped relevance.
    pub relevance: Tensor,
}

fn assignment(model: &Model, composite: Option<&Composite>) -> Result<RuleAssignment> {
    match composite {
        Some(c) => register(model, c),
        None => Ok(RuleAssignment::gradient(model)),
    }
}

/// Modified (or, without a composite, plain) gradient. With `times_input` the result
/// is multiplied by `x`.
pub fn attribute_gradient(
    model: &Model,
    composite: Option<&Composite>,
    x: &Tensor,
    r_out: &Tensor,
    times_input: bool,
) -> Result<AttributionResult> {
    let a = assignment(model, composite)?;
    let (output, mut relevance) = a.attribute(x, r_out)?;
    if times_input {
        relevance = t::mul(&relevance, x)?;
    }
    Ok(AttributionResult { output, relevance })
}

/// Mean attribution over `n` inputs perturbed by `N(0, (noise_rel * (max x - min x))²)`.
pub fn attribute_smoothgrad(
    model: &Model,
    composite: Option<&Composite>,
    x: &Tensor,
    r_out: &Tensor,
    n: usize,
    noise_rel: f64,
    seed: u64,
) -> Result<AttributionResult> {
    if n == 0 || !(noise_rel >= 0.0) {
        return Err(AttributionError::InvalidRule(format!(
            "smoothgrad needs n >= 1 and noise_rel >= 0 (got {n}, {noise_rel})"
        )));
    }
    let a = assignment(model, composite)?;
    let (output, plain) = a.attribute(x, r_out)?;
    let sigma = noise_rel * (t::max(x).unwrap_or(0.0) - t::min(x).unwrap_or(0.0));
    if sigma == 0.0 {
        return Ok(AttributionResult {
            output,
            relevance: plain,
        });
    }
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
    let mut rng = rng::derived(seed, "smoothgrad");
    let base = x.to_f64_vec();
    let mut acc = vec![0.0f64; base.len()];
    for _ in 0..n {
        let noisy: Vec<f64> = base.iter().map(|v| v + normal.sample(&mut rng)).collect();
        let xn = Tensor::from_f64(x.shape(), noisy)?.cast(x.dtype());
        let (_, r) = a.attribute(&xn, r_out)?;
        for (s, v) in acc.iter_mut().zip(r.to_f64_vec()) {
            *s += v;
        }
    }
    let mean: Vec<f64> = acc.into_iter().map(|s| s / n as f64).collect();
    Ok(AttributionResult {
        output,
        relevance: Tensor::from_f64(x.shape(), mean)?.cast(x.dtype()),
    })
}

/// Integrated gradients with the midpoint rule over `steps` points.
pub fn attribute_integrated_gradients(
    model: &Model,
    x: &Tensor,
    baseline: &Tensor,
    r_out: &Tensor,
    steps: usize,
) -> Result<AttributionResult> {
    if steps == 0 {
        return Err(AttributionError::InvalidRule("integrated gradients needs steps >= 1".into()));
    }
    if baseline.shape() != x.shape() {
        return Err(AttributionError::ShapeMismatch(format!(
            "baseline {:?} vs input {:?}",
            baseline.shape(),
            x.shape()
        )));
    }
    let a = RuleAssignment::gradient(model);
    let (output, _) = a.attribute(x, r_out)?;
    let xv = x.to_f64_vec();
    let bv = baseline.to_f64_vec();
    let diff: Vec<f64> = xv.iter().zip(&bv).map(|(p, q)| p - q).collect();
    let mut acc = vec![0.0f64; xv.len()];
    for s in 1..=steps {
        let alpha = (s as f64 - 0.5) / steps as f64;
        let point: Vec<f64> = bv.iter().zip(&diff).map(|(b, d)| b + alpha * d).collect();
        let (_, g) = a.attribute(&Tensor::from_f64(x.shape(), point)?.cast(x.dtype()), r_out)?;
        for (s, v) in acc.iter_mut().zip(g.to_f64_vec()) {
            *s += v;
        }
    }
    let rel: Vec<f64> = diff
        .iter()
        .zip(&acc)
        .map(|(d, s)| d * (s / steps as f64))
        .collect();
    Ok(AttributionResult {
        output,
        relevance: Tensor::from_f64(x.shape(), rel)?.cast(x.dtype()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct OcclusionConfig {
    pub window: (usize, usize),
    pub stride: (usize, usize),
    pub fill: f64,
}

/// Leading extents are treated as channels; every channel is occluded together.
fn spatial(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        [w] => Ok((1, 1, *w)),
        [h, w] => Ok((1, *h, *w)),
        [rest @ .., h, w] => Ok((rest.iter().product(), *h, *w)),
        [] => Err(AttributionError::ShapeMismatch("occlusion needs a spatial input".into())),
    }
}

/// Window positions along one axis.
pub(crate) fn positions(extent: usize, window: usize, stride: usize) -> Vec<usize> {
    (0..)
        .map(|i| i * stride)
        .take_while(|p| p + window <= extent)
        .collect()
}

/// Score drop `<f(x), r> - <f(x'), r>` for each occluded `x'`, spread over the window and
/// averaged per cell.
pub fn attribute_occlusion(
    model: &Model,
    x: &Tensor,
    r_out: &Tensor,
    cfg: &OcclusionConfig,
) -> Result<AttributionResult> {
    let (c, h, w) = spatial(x.shape())?;
    let (wh, ww) = cfg.window;
    let (sh, sw) = cfg.stride;
    if wh == 0 || ww == 0 || wh > h || ww > w || sh == 0 || sw == 0 {
        return Err(AttributionError::ShapeMismatch(format!(
            "window {:?} / stride {:?} on {h}x{w}",
            cfg.window, cfg.stride
        )));
    }
    let output = model.predict(x)?;
    if r_out.shape() != output.shape() {
        return Err(AttributionError::ShapeMismatch(format!(
            "class weights {:?} vs output {:?}",
            r_out.shape(),
            output.shape()
        )));
    }
    let weights = r_out.to_f64_vec();
    let score = |o: &Tensor| -> f64 { o.to_f64_vec().iter().zip(&weights).map(|(a, b)| a * b).sum() };
    let base_score = score(&output);
    let xv = x.to_f64_vec();
    let grid: Vec<(usize, usize)> = positions(h, wh, sh)
        .into_iter()
        .flat_map(|i| positions(w, ww, sw).into_iter().map(move |j| (i, j)))
        .collect();
    let drops: Vec<f64> = grid
        .par_iter()
        .map(|&(i, j)| {
            let mut occ = xv.clone();
            for ch in 0..c {
                for di in 0..wh {
                    for dj in 0..ww {
                        occ[ch * h * w + (i + di) * w + j + dj] = cfg.fill;
                    }
                }
            }
            let xo = Tensor::from_f64(x.shape(), occ)?.cast(x.dtype());
            Ok(base_score - score(&model.predict(&xo)?))
        })
        .collect::<Result<_>>()?;
    let mut sum = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    for (&(i, j), d) in grid.iter().zip(&drops) {
        for di in 0..wh {
            for dj in 0..ww {
                sum[(i + di) * w + j + dj] += d;
                count[(i + di) * w + j + dj] += 1;
            }
        }
    }
    let cell: Vec<f64> = sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| if n > 0 { s / n as f64 } else { 0.0 })
        .collect();
    let rel: Vec<f64> = (0..c * h * w).map(|k| cell[k % (h * w)]).collect();
    Ok(AttributionResult {
        output,
        relevance: Tensor::from_f64(x.shape(), rel)?.cast(x.dtype()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Layer, LayerKind, Model};
    use crate::DType;

    fn sum_model(n: usize) -> Model {
        Model::new(
            vec![1, 1, n],
            vec![
                Layer::new("flat", LayerKind::Flatten),
                Layer::new(
                    "fc",
                    LayerKind::Linear {
                        weight: Tensor::ones(DType::F64, &[1, n]),
                        bias: Tensor::zeros(DType::F64, &[1]),
                    },
                ),
            ],
        )
        .unwrap()
    }

    fn linear(w: &[f64]) -> Model {
        Model::new(
            vec![w.len()],
            vec![Layer::new(
                "fc",
                LayerKind::Linear {
                    weight: Tensor::from_f64(&[1, w.len()], w.to_vec()).unwrap(),
                    bias: Tensor::from_f64(&[1], vec![0.5]).unwrap(),
                },
            )],
        )
        .unwrap()
    }

    fn one() -> Tensor {
        Tensor::from_f64(&[1], vec![1.]).unwrap()
    }

    #[test]
    fn plain_gradient_example() {
        let m = Model::new(
            vec![2],
            vec![Layer::new(
                "fc",
                LayerKind::Linear {
                    weight: Tensor::from_f64(&[1, 2], vec![2., -1.]).unwrap(),
                    bias: Tensor::zeros(DType::F64, &[1]),
                },
            )],
        )
        .unwrap();
        let x = Tensor::from_f64(&[2], vec![1., 1.]).unwrap();
        let r = attribute_gradient(&m, None, &x, &one(), false).unwrap();
        assert_eq!(r.relevance.to_f64_vec(), vec![2., -1.]);
        assert_eq!(r.output.to_f64_vec(), vec![1.]);
    }

    #[test]
    fn occlusion_of_sum_is_input() {
        let m = sum_model(5);
        let x = Tensor::from_f64(&[1, 1, 5], vec![1., -2., 3., 0.5, 4.]).unwrap();
        let cfg = OcclusionConfig {
            window: (1, 1),
            stride: (1, 1),
            fill: 0.0,
        };
        let r = attribute_occlusion(&m, &x, &one(), &cfg).unwrap();
        assert_eq!(r.relevance.to_f64_vec(), x.to_f64_vec());

        let whole = OcclusionConfig {
            window: (1, 5),
            stride: (1, 1),
            fill: 1.0,
        };
        let r = attribute_occlusion(&m, &x, &one(), &whole).unwrap();
        assert!(r.relevance.to_f64_vec().iter().all(|&v| v == 6.5 - 5.0));

        let flat = Tensor::full(DType::F64, &[1, 1, 5], 0.0);
        let r = attribute_occlusion(&m, &flat, &one(), &cfg).unwrap();
        assert!(r.relevance.to_f64_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn integrated_gradients_linear() {
        let m = linear(&[1.5, -2.0, 0.25]);
        let x = Tensor::from_f64(&[3], vec![2., 1., -4.]).unwrap();
        let zero = Tensor::zeros(DType::F64, &[3]);
        for steps in [1, 7] {
            let r = attribute_integrated_gradients(&m, &x, &zero, &one(), steps).unwrap();
            assert_eq!(r.relevance.to_f64_vec(), vec![3., -2., -1.]);
        }
        let r = attribute_integrated_gradients(&m, &x, &x, &one(), 4).unwrap();
        assert!(r.relevance.to_f64_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn smoothgrad_behaviour() {
        let m = linear(&[1.5, -2.0, 0.25]);
        let x = Tensor::from_f64(&[3], vec![2., 1., -4.]).unwrap();
        let plain = attribute_gradient(&m, None, &x, &one(), false).unwrap();
        let s0 = attribute_smoothgrad(&m, None, &x, &one(), 5, 0.0, 1).unwrap();
        assert_eq!(s0, plain);
        let a = attribute_smoothgrad(&m, None, &x, &one(), 1, 0.2, 9).unwrap();
        let b = attribute_smoothgrad(&m, None, &x, &one(), 1, 0.2, 9).unwrap();
        assert_eq!(a, b);
        let many = attribute_smoothgrad(&m, None, &x, &one(), 1000, 0.2, 0).unwrap();
        for (g, w) in many.relevance.to_f64_vec().iter().zip([1.5, -2.0, 0.25]) {
            assert!((g - w).abs() <= 0.05 * w.abs());
        }
    }
}
