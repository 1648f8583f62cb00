//! Acceptance suite: one line per criterion, non-zero exit when any fails.
//!
//! Every check compares against an oracle computed here, not inside the library.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use relvis_cli::{cmd_analyze, cmd_attribute, cmd_synth, cmd_train, AnalyzeOptions, SynthSpec};
use relvis_core::attribution::{
    attribute_gradient, attribute_integrated_gradients, attribute_occlusion, canonize_merge_batchnorm, register,
    Canonizer, Composite, CompositeParams, Matcher, OcclusionConfig, Rule,
};
use relvis_core::nn::{Layer, LayerKind, Model, ModelBuilder};
use relvis_core::pipeline::{CacheStore, PipelineError};
use relvis_core::rng::{self, Rng};
use relvis_core::spray::{
    analyze_category, eig_smallest, knn_affinity, normalized_laplacian, pairwise_distances, spray_pipeline, tsne,
    AnalysisParams,
};
use relvis_core::store::{
    blob, decode_selection, encode_selection, AnalysisStore, BlobStore, CategoryAnalysis, Clustering, DatasetStore,
    Embedding, Labels, ProjectManifest, SelectionDocument, Strategy,
};
use relvis_core::{DType, Tensor};

type Check = Result<String, String>;

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_f64(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn one_hot(n: usize, i: usize) -> Tensor {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    Tensor::from_f64(&[n], v).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.to_f64_vec()
        .iter()
        .zip(b.to_f64_vec())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Zero-bias architectures for the conservation checks.
fn zero_bias_nets(seed: u64) -> Vec<Model> {
    let f = DType::F64;
    vec![
        ModelBuilder::new(&[1, 8, 8], f)
            .flatten()
            .linear_no_bias(16)
            .relu()
            .linear_no_bias(4)
            .build(seed),
        ModelBuilder::new(&[1, 8, 8], f)
            .conv_no_bias(4, 3, 1, 1)
            .relu()
            .maxpool(2)
            .flatten()
            .linear_no_bias(3)
            .build(seed),
        ModelBuilder::new(&[2, 8, 8], f)
            .conv_no_bias(4, 3, 1, 1)
            .relu()
            .conv_no_bias(6, 3, 1, 0)
            .relu()
            .avgpool(2)
            .flatten()
            .linear_no_bias(5)
            .build(seed),
        ModelBuilder::new(&[1, 8, 8], f)
            .conv_no_bias(6, 3, 2, 1)
            .relu()
            .flatten()
            .linear_no_bias(8)
            .relu()
            .linear_no_bias(3)
            .build(seed),
        ModelBuilder::new(&[1, 16, 16], f)
            .conv_no_bias(4, 3, 1, 1)
            .relu()
            .maxpool(2)
            .conv_no_bias(8, 3, 1, 1)
            .relu()
            .maxpool(2)
            .flatten()
            .linear_no_bias(16)
            .relu()
            .linear_no_bias(3)
            .build(seed),
    ]
    .into_iter()
    .map(|m| m.unwrap())
    .collect()
}

fn epsilon_everywhere(eps: f64) -> Composite {
    Composite::new(vec![(Matcher::Affine, Rule::epsilon(eps).unwrap())], vec![])
}

fn affine_rule(rule: Rule) -> Composite {
    Composite::new(vec![(Matcher::Affine, rule)], vec![])
}

fn criterion_1() -> Check {
    let mut worst = 0.0f64;
    let mut runs = 0;
    for seed in 0..20 {
        for (a, model) in zero_bias_nets(seed).into_iter().enumerate() {
            let mut rng = rng::derived(seed, "conservation");
            let x = uniform(&mut rng, model.input_shape(), -1.0, 1.0);
            let out = model.predict(&x).unwrap();
            let classes = out.len();
            let target = rng.random_range(0..classes);
            let r_out = Tensor::from_f64(&[classes], {
                let mut v = vec![0.0; classes];
                v[target] = out.to_f64_vec()[target];
                v
            })
            .unwrap();
            let reg = register(&model, &epsilon_everywhere(0.0)).unwrap();
            let (_, layers) = reg.attribute_layers(&x, &r_out).unwrap();
            let top: f64 = r_out.to_f64_vec().iter().sum();
            for (l, r) in layers.iter().enumerate() {
                let s: f64 = r.to_f64_vec().iter().sum();
                let rel = (s - top).abs() / top.abs().max(1e-300);
                if !(rel <= 1e-5) {
                    return Err(format!("arch {a} seed {seed} layer {l}: sum {s} vs {top} (rel {rel:.2e})"));
                }
                worst = worst.max(rel);
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} nets, worst relative deviation {worst:.2e}"))
}

fn criterion_2() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        // Max pooling routes like the gradient; average pooling would not.
        for (a, model) in zero_bias_nets(seed).into_iter().enumerate().filter(|(a, _)| *a != 2) {
            let mut rng = rng::derived(seed, "lrp0");
            let x = uniform(&mut rng, model.input_shape(), -1.0, 1.0);
            let classes = model.output_shape().iter().product();
            let c = rng.random_range(0..classes);
            let seed_c = one_hot(classes, c);
            // LRP-0 started from f_c(x) e_c reproduces x * df_c/dx.
            let f_c = model.predict(&x).unwrap().to_f64_vec()[c];
            let r_out = relvis_core::tensor::scale(&seed_c, f_c).unwrap();
            let lrp = register(&model, &epsilon_everywhere(0.0)).unwrap().attribute(&x, &r_out).unwrap().1;
            let gxi = attribute_gradient(&model, None, &x, &seed_c, true).unwrap().relevance;
            let d = max_abs_diff(&lrp, &gxi);
            if !(d <= 1e-6) {
                return Err(format!("arch {a} seed {seed}: max abs diff {d:.2e}"));
            }
            worst = worst.max(d);
        }
    }
    Ok(format!("20 seeds x 4 architectures, max abs diff {worst:.2e}"))
}

fn criterion_3() -> Check {
    let mut worst_g = 0.0f64;
    let mut worst_ab = 0.0f64;
    for seed in 0..20 {
        let model = ModelBuilder::new(&[2, 8, 8], DType::F64)
            .conv(4, 3, 1, 1)
            .relu()
            .maxpool(2)
            .flatten()
            .linear(10)
            .relu()
            .linear(3)
            .build(seed)
            .unwrap();
        let mut rng = rng::derived(seed, "identities");
        let x = uniform(&mut rng, &[2, 8, 8], -1.0, 1.0);
        let r_out = one_hot(3, rng.random_range(0..3));
        let run = |c: Composite| register(&model, &c).unwrap().attribute(&x, &r_out).unwrap().1;
        for eps in [0.0, 1e-6, 0.1] {
            let g = run(affine_rule(Rule::gamma(0.0, eps).unwrap()));
            let e = run(affine_rule(Rule::epsilon(eps).unwrap()));
            worst_g = worst_g.max(max_abs_diff(&g, &e));
        }
        let ab = run(affine_rule(Rule::alpha_beta(1.0, 0.0).unwrap()));
        let zp = run(affine_rule(Rule::ZPlus));
        worst_ab = worst_ab.max(max_abs_diff(&ab, &zp));
    }
    if worst_g <= 1e-12 && worst_ab <= 1e-12 {
        Ok(format!("gamma(0) vs epsilon {worst_g:.1e}, alpha-beta(1,0) vs z-plus {worst_ab:.1e}"))
    } else {
        Err(format!("gamma(0) vs epsilon {worst_g:.2e}, alpha-beta(1,0) vs z-plus {worst_ab:.2e}"))
    }
}

fn f32_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    uniform(rng, shape, lo, hi).cast(DType::F32)
}

fn linear_bn_model(seed: u64) -> Model {
    let mut rng = rng::derived(seed, "linear-bn");
    let bn = |name: &str, n: usize, rng: &mut Rng| {
        Layer::new(
            name,
            LayerKind::BatchNorm {
                mean: f32_tensor(rng, &[n], -1.0, 1.0),
                var: f32_tensor(rng, &[n], 0.25, 2.0),
                scale: f32_tensor(rng, &[n], 0.5, 1.5),
                shift: f32_tensor(rng, &[n], -0.5, 0.5),
                eps: 1e-5,
            },
        )
    };
    let fc1 = Layer::new(
        "fc1",
        LayerKind::Linear {
            weight: f32_tensor(&mut rng, &[12, 6], -0.5, 0.5),
            bias: f32_tensor(&mut rng, &[12], -0.1, 0.1),
        },
    );
    let bn1 = bn("bn1", 12, &mut rng);
    let fc2 = Layer::new(
        "fc2",
        LayerKind::Linear {
            weight: f32_tensor(&mut rng, &[4, 12], -0.5, 0.5),
            bias: f32_tensor(&mut rng, &[4], -0.1, 0.1),
        },
    );
    let bn2 = bn("bn2", 4, &mut rng);
    Model::new(vec![6], vec![fc1, bn1, Layer::new("relu", LayerKind::Relu), fc2, bn2]).unwrap()
}

fn criterion_4() -> Check {
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let model = linear_bn_model(seed);
        let (merged, _) = canonize_merge_batchnorm(&model).map_err(|e| e.to_string())?;
        let mut copy = model.clone();
        let state = Canonizer::MergeBatchNorm.apply(&mut copy).map_err(|e| e.to_string())?;
        if state.merged_count() != 2 {
            return Err(format!("seed {seed}: merged {} batch norms, expected 2", state.merged_count()));
        }
        state.restore(&mut copy);
        if copy != model {
            return Err(format!("seed {seed}: restored model differs"));
        }
        let mut rng = rng::derived(seed, "bn-inputs");
        for _ in 0..100 {
            let x = f32_tensor(&mut rng, &[6], -2.0, 2.0);
            let a = model.predict(&x).unwrap();
            let d = max_abs_diff(&a, &merged.predict(&x).unwrap());
            if !(d <= 1e-4) {
                return Err(format!("seed {seed}: merged output differs by {d:.2e}"));
            }
            worst = worst.max(d);
            let restored = copy.predict(&x).unwrap();
            if a.as_f32().unwrap().iter().zip(restored.as_f32().unwrap()).any(|(p, q)| p.to_bits() != q.to_bits()) {
                return Err(format!("seed {seed}: restored output is not bitwise equal"));
            }
        }
    }
    Ok(format!("20 models x 100 inputs, max abs diff {worst:.2e}, restore bitwise"))
}

fn criterion_5() -> Check {
    let mut misses = Vec::new();
    let mut worst_gap = 0.0f64;
    for seed in 0..20 {
        let model = if seed % 2 == 0 {
            ModelBuilder::new(&[1, 6, 6], DType::F64)
                .flatten()
                .linear(16)
                .relu()
                .linear(8)
                .relu()
                .linear(3)
                .build(seed)
        } else {
            ModelBuilder::new(&[1, 6, 6], DType::F64)
                .conv(3, 3, 1, 1)
                .relu()
                .flatten()
                .linear(8)
                .relu()
                .linear(3)
                .build(seed)
        }
        .unwrap();
        let mut rng = rng::derived(seed, "ig");
        let x = uniform(&mut rng, &[1, 6, 6], 0.0, 1.0);
        let zero = Tensor::zeros(DType::F64, &[1, 6, 6]);
        let c = rng.random_range(0..3);
        let delta = model.predict(&x).unwrap().to_f64_vec()[c] - model.predict(&zero).unwrap().to_f64_vec()[c];
        let r = attribute_integrated_gradients(&model, &x, &zero, &one_hot(3, c), 128).unwrap();
        let total: f64 = r.relevance.to_f64_vec().iter().sum();
        worst_gap = worst_gap.max((total - delta).abs());
        let rel = (total - delta).abs() / delta.abs();
        if !(rel <= 0.05) {
            misses.push(format!("seed {seed} {:.1}% of {delta:.4}", rel * 100.0));
        }
    }
    let mut worst_lin = 0.0f64;
    for seed in 0..20 {
        let model = ModelBuilder::new(&[1, 5, 5], DType::F64).flatten().linear(4).build(seed).unwrap();
        let mut rng = rng::derived(seed, "ig-linear");
        let x = uniform(&mut rng, &[1, 5, 5], -1.0, 1.0);
        let b = uniform(&mut rng, &[1, 5, 5], -1.0, 1.0);
        let c = rng.random_range(0..4);
        let delta = model.predict(&x).unwrap().to_f64_vec()[c] - model.predict(&b).unwrap().to_f64_vec()[c];
        let r = attribute_integrated_gradients(&model, &x, &b, &one_hot(4, c), 1).unwrap();
        let total: f64 = r.relevance.to_f64_vec().iter().sum();
        worst_lin = worst_lin.max((total - delta).abs());
    }
    let line = format!(
        "ReLU nets {}/20 within 5% at 128 steps (largest absolute gap {worst_gap:.4}){}; linear gap {worst_lin:.1e} at 1 step",
        20 - misses.len(),
        if misses.is_empty() { String::new() } else { format!(", misses: {}", misses.join(", ")) }
    );
    if misses.is_empty() && worst_lin <= 1e-12 {
        Ok(line)
    } else {
        Err(line)
    }
}

/// Occlusion by brute force: re-evaluate every window, then average the drops per cell.
fn occlusion_oracle(model: &Model, x: &Tensor, weights: &[f64], cfg: &OcclusionConfig) -> Vec<f64> {
    let shape = x.shape();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let c = x.len() / (h * w);
    let score = |t: &Tensor| -> f64 { t.to_f64_vec().iter().zip(weights).map(|(a, b)| a * b).sum() };
    let base = score(&model.predict(x).unwrap());
    let xv = x.to_f64_vec();
    let mut tops = Vec::new();
    let mut i = 0;
    while i + cfg.window.0 <= h {
        let mut j = 0;
        while j + cfg.window.1 <= w {
            tops.push((i, j));
            j += cfg.stride.1;
        }
        i += cfg.stride.0;
    }
    let drops: Vec<f64> = tops
        .iter()
        .map(|&(i, j)| {
            let mut v = xv.clone();
            for ch in 0..c {
                for r in i..i + cfg.window.0 {
                    for q in j..j + cfg.window.1 {
                        v[ch * h * w + r * w + q] = cfg.fill;
                    }
                }
            }
            base - score(&model.predict(&Tensor::from_f64(shape, v).unwrap()).unwrap())
        })
        .collect();
    let mut out = vec![0.0; c * h * w];
    for r in 0..h {
        for q in 0..w {
            let (mut s, mut n) = (0.0, 0u32);
            for (&(i, j), d) in tops.iter().zip(&drops) {
                if (i..i + cfg.window.0).contains(&r) && (j..j + cfg.window.1).contains(&q) {
                    s += d;
                    n += 1;
                }
            }
            let cell = if n > 0 { s / n as f64 } else { 0.0 };
            for ch in 0..c {
                out[ch * h * w + r * w + q] = cell;
            }
        }
    }
    out
}

fn criterion_6() -> Check {
    let configs = [
        ((2, 2), (2, 2), 0.0),
        ((3, 3), (1, 1), 0.0),
        ((3, 2), (2, 1), 0.5),
        ((5, 5), (3, 3), -1.0),
    ];
    let mut n = 0;
    for seed in 0..5 {
        for channels in [1, 2] {
            let model = ModelBuilder::new(&[channels, 8, 8], DType::F64)
                .conv(4, 3, 1, 1)
                .relu()
                .maxpool(2)
                .flatten()
                .linear(3)
                .build(seed)
                .unwrap();
            let mut rng = rng::derived(seed, "occlusion");
            let x = uniform(&mut rng, &[channels, 8, 8], -1.0, 1.0);
            let weights: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r_out = Tensor::from_f64(&[3], weights.clone()).unwrap();
            for &(window, stride, fill) in &configs {
                let cfg = OcclusionConfig { window, stride, fill };
                let got = attribute_occlusion(&model, &x, &r_out, &cfg).unwrap().relevance.to_f64_vec();
                let want = occlusion_oracle(&model, &x, &weights, &cfg);
                if got.iter().zip(&want).any(|(a, b)| a.to_bits() != b.to_bits()) {
                    return Err(format!("seed {seed}, {channels} channels, window {window:?} stride {stride:?} differ"));
                }
                n += 1;
            }
        }
    }
    Ok(format!("{n} configurations bitwise equal to brute force"))
}

fn gaussian_blobs(centers: &[Vec<f64>], per: usize, sigma: f64, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = rng::derived(seed, "blobs");
    let d = centers[0].len();
    let mut v = Vec::new();
    let mut labels = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per {
            v.extend(center.iter().map(|m| m + sigma * normal(&mut rng)));
            labels.push(c);
        }
    }
    (Tensor::from_f64(&[centers.len() * per, d], v).unwrap(), labels)
}

/// True when `a` and `b` induce the same partition.
fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut fwd = BTreeMap::new();
    let mut back = BTreeMap::new();
    a.iter().zip(b).all(|(x, y)| *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x)
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    parent[i] = r;
    r
}

fn components(w: &Tensor) -> usize {
    let n = w.shape()[0];
    let v = w.to_f64_vec();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if v[i * n + j] > 0.0 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                parent[a] = b;
            }
        }
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

fn criterion_7() -> Check {
    let mut c0 = vec![0.0; 5];
    let mut c1 = vec![0.0; 5];
    c0[0] = 6.0;
    c1[1] = 6.0;
    let (x, truth) = gaussian_blobs(&[c0, c1], 50, 1.0, 7);
    let params = AnalysisParams {
        kmeans_range: 2..=2,
        tsne_iters: 250,
        ..Default::default()
    };
    let (a, _) = analyze_category(&x, (0..100).collect(), &params, None).map_err(|e| e.to_string())?;
    let labels: Vec<usize> = a.clusterings["kmeans-2"].labels.iter().map(|&l| l as usize).collect();
    let ari = relvis_core::spray::adjusted_rand_index(&labels, &truth);
    if !same_partition(&labels, &truth) || ari != 1.0 {
        return Err(format!("kmeans-2 ARI {ari}"));
    }
    for g in 0..20u64 {
        let mut rng = rng::derived(g, "graphs");
        let groups = rng.random_range(2..=5);
        let k = rng.random_range(2..=5);
        let mut v = Vec::new();
        for c in 0..groups {
            for _ in 0..rng.random_range(8..=14) {
                v.push(1000.0 * c as f64 + rng.random_range(-1.0..1.0));
                v.push(rng.random_range(-1.0..1.0));
                v.push(rng.random_range(-1.0..1.0));
            }
        }
        let n = v.len() / 3;
        let x = Tensor::from_f64(&[n, 3], v).unwrap();
        let w = knn_affinity(&pairwise_distances(&x).unwrap(), k).unwrap();
        let expected = components(&w);
        let eig = eig_smallest(&normalized_laplacian(&w).unwrap(), n).unwrap();
        let zeros = eig.values.iter().filter(|l| l.abs() < 1e-8).count();
        if zeros != expected || expected < groups {
            return Err(format!("graph {g}: {zeros} zero eigenvalues, {expected} components"));
        }
    }
    Ok(format!("two blobs ARI {ari}; 20 graphs zero-eigenvalue multiplicity = components"))
}

fn criterion_8() -> Check {
    let centers: Vec<Vec<f64>> = (0..3)
        .map(|c| (0..10).map(|d| if d == c { 8.0 } else { 0.0 }).collect())
        .collect();
    let (x, labels) = gaussian_blobs(&centers, 50, 1.0, 11);
    let r = tsne(&x, 10.0, 1000, 0).map_err(|e| e.to_string())?;
    let e = r.embedding.to_f64_vec();
    let n = labels.len();
    let mut hits = 0;
    for i in 0..n {
        let nn = (0..n)
            .filter(|&j| j != i)
            .min_by(|&a, &b| {
                let d = |j: usize| (e[2 * i] - e[2 * j]).powi(2) + (e[2 * i + 1] - e[2 * j + 1]).powi(2);
                d(a).total_cmp(&d(b))
            })
            .unwrap();
        hits += (labels[nn] == labels[i]) as usize;
    }
    let purity = hits as f64 / n as f64;
    let (kl_250, kl_final) = (r.kl[250], *r.kl.last().unwrap());
    let line = format!("1-NN purity {purity:.3}, KL {kl_250:.4} at 250 -> {kl_final:.4} final");
    if purity >= 0.95 && kl_final < kl_250 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn encoded(out: &relvis_core::pipeline::PipelineOutput) -> Vec<(String, Vec<u8>)> {
    out.outputs.iter().map(|(k, v)| (k.clone(), v.encode())).collect()
}

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cache = CacheStore::new(dir.path());
    let (x, _) = gaussian_blobs(&[vec![4.0, 0.0, 0.0], vec![0.0, 4.0, 0.0]], 30, 1.0, 3);
    let params = AnalysisParams {
        kmeans_range: 2..=6,
        ..Default::default()
    };
    let run = |p: &AnalysisParams| spray_pipeline(p, Some(&cache)).unwrap().run(x.clone().into()).unwrap();
    let cold = run(&params);
    let warm = run(&params);
    if warm.stats.total_executed() != 0 {
        return Err(format!("warm run executed {:?}", warm.stats.executed));
    }
    if encoded(&cold) != encoded(&warm) {
        return Err("warm outputs differ from the cold run".into());
    }
    let changed = run(&AnalysisParams { knn_k: 7, ..params.clone() });
    let executed: Vec<&str> = changed.stats.executed.keys().map(String::as_str).collect();
    let upstream_hit = ["normalize", "distance"]
        .iter()
        .all(|p| changed.stats.cache_hits.get(*p) == Some(&1) && !changed.stats.executed.contains_key(*p));
    let downstream_ran = ["knn-affinity", "laplacian", "eigen"]
        .iter()
        .all(|p| changed.stats.executed.get(*p) == Some(&1));
    if !upstream_hit || !downstream_ran || changed.stats.total_executed() != 3 + 5 {
        return Err(format!("after changing knn_k executed {executed:?}"));
    }
    Ok(format!(
        "cold {} executed, warm 0 with identical bytes; knn_k change reran {}",
        cold.stats.total_executed(),
        changed.stats.total_executed()
    ))
}

fn acceptance_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn criterion_10() -> Check {
    let root = acceptance_dir();
    let _ = std::fs::remove_dir_all(&root);
    let (data, model, attr, analysis) = (root.join("data"), root.join("model"), root.join("attr"), root.join("analysis"));
    let e = |e: relvis_cli::CliError| e.to_string();
    let spec = SynthSpec {
        n_per_class: 200,
        watermark_fraction: 0.5,
        seed: 0,
    };
    cmd_synth(&data, &spec).map_err(e)?;
    let train = cmd_train(&data, &model, 30, 0.01, 0).map_err(e)?;
    if train.accuracy < 0.95 {
        return Err(format!("train accuracy {:.4}", train.accuracy));
    }
    cmd_attribute(
        &data,
        &model,
        &attr,
        "epsilon-gamma-box",
        &CompositeParams {
            low: -3.0,
            high: 3.0,
            ..Default::default()
        },
        Strategy::TrueLabel,
    )
    .map_err(e)?;
    let opts = AnalyzeOptions {
        per_category: true,
        only: vec!["circle".into()],
        data_dir: Some(data.clone()),
    };
    let s = cmd_analyze(&attr, &analysis, &AnalysisParams::default(), &opts).map_err(e)?;
    let r = s.watermark.ok_or("no watermark report")?;
    let mask = DatasetStore::open(&data).map_err(|e| e.to_string())?.extra("watermark").map_err(|e| e.to_string())?;
    let marked = mask.to_f64_vec().iter().filter(|&&m| m > 0.0).count();
    let line = format!(
        "accuracy {:.3}; {} cluster {} ({} samples): coverage {:.3} of {marked}, purity {:.3}, tag ratio {:.2}; run.json in {}",
        train.accuracy,
        r.clustering,
        r.cluster,
        r.cluster_size,
        r.coverage,
        r.purity,
        r.tag_ratio,
        analysis.display()
    );
    let k: usize = r.clustering.trim_start_matches("kmeans-").parse().unwrap_or(0);
    if (2..=19).contains(&k) && r.coverage >= 0.8 && r.purity >= 0.8 && r.tag_ratio >= 3.0 {
        Ok(line)
    } else {
        Err(line)
    }
}

fn criterion_11() -> Check {
    let t = Tensor::from_f32(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let mut expected = b"VZT1".to_vec();
    expected.extend_from_slice(&[1, 2]);
    expected.extend_from_slice(&[2, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0, 0, 0, 0, 0]);
    expected.extend_from_slice(&[0, 0, 0x80, 0x3f, 0, 0, 0, 0x40, 0, 0, 0x40, 0x40, 0, 0, 0x80, 0x40]);
    let bytes = blob::encode(&t);
    if bytes.len() != 38 || bytes != expected {
        return Err(format!("blob is {} bytes: {bytes:02x?}", bytes.len()));
    }
    if blob::decode(&bytes).map_err(|e| e.to_string())? != t {
        return Err("blob does not decode to the original".into());
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let err = |e: relvis_core::store::StoreError| e.to_string();
    let mut store = BlobStore::create(&dir.path().join("blobs"), "test").map_err(err)?;
    let i64s = Tensor::from_i64(&[3], vec![-1, 0, i64::MAX]).unwrap();
    store.put("a", &i64s, Default::default()).map_err(err)?;
    let reopened = BlobStore::open(&dir.path().join("blobs")).map_err(err)?;
    if reopened.get("a").map_err(err)? != i64s {
        return Err("blob store roundtrip".into());
    }

    let data = Tensor::from_u8(&[3, 1, 2, 2], (0..12).collect()).unwrap();
    let labels = Labels::Single(vec![0, 2, 1]);
    DatasetStore::write(&dir.path().join("ds"), &data, &labels, &[]).map_err(err)?;
    let ds = DatasetStore::open(&dir.path().join("ds")).map_err(err)?;
    if ds.len() != 3 || ds.sample(1).map_err(err)? != data.slice_rows(1, 2).unwrap().reshape(&[1, 2, 2]).unwrap() {
        return Err("dataset store roundtrip".into());
    }

    let analysis = CategoryAnalysis {
        index: vec![4, 9, 2],
        embeddings: BTreeMap::from([(
            "spectral".to_string(),
            Embedding {
                data: Tensor::from_f64(&[3, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
                eigenvalues: Some(vec![0.0, 0.25]),
                base: None,
                base_index: None,
            },
        )]),
        clusterings: BTreeMap::from([(
            "kmeans-2".to_string(),
            Clustering {
                labels: vec![0, 1, 0],
                embedding: "spectral".into(),
                params: BTreeMap::from([("k".to_string(), serde_json::json!(2))]),
            },
        )]),
        scores: BTreeMap::from([("eigenvalue_1".to_string(), 0.25)]),
    };
    let mut an = AnalysisStore::create(&dir.path().join("an")).map_err(err)?;
    an.write_category("spray", "circle", &analysis).map_err(err)?;
    let back = AnalysisStore::open(&dir.path().join("an")).map_err(err)?.read_category("spray", "circle").map_err(err)?;
    if back != analysis {
        return Err("analysis store roundtrip".into());
    }

    let manifest = ProjectManifest::from_json(
        r#"{"project_name":"p","model_name":"m",
            "dataset":{"name":"d","type":"vzstore","path":"/x","input_width":32,"input_height":32,
                       "up_sampling":"none","down_sampling":"none","label_map_path":"/x/label-map.json"},
            "attributions":{"method":"epsilon-gamma-box","strategy":"true_label","sources":["/a"]},
            "analyses":[{"method":"spray","sources":["/b"]}]}"#,
    )
    .map_err(err)?;
    if ProjectManifest::from_json(&manifest.to_json()).map_err(err)? != manifest {
        return Err("manifest roundtrip".into());
    }

    let doc = SelectionDocument {
        project: "0".into(),
        analysis: "spray".into(),
        category: "circle".into(),
        clustering: "kmeans-2".into(),
        embedding: "tsne".into(),
        colormap: "coldnhot".into(),
        mode: "overlay".into(),
        selected_indices: vec![3, 1, 4],
    };
    let enc = encode_selection(&doc).map_err(err)?;
    if decode_selection(&enc).map_err(err)? != doc || encode_selection(&decode_selection(&enc).map_err(err)?).map_err(err)? != enc {
        return Err("selection roundtrip".into());
    }

    let cache = CacheStore::new(dir.path().join("cache"));
    let v: relvis_core::pipeline::Value = t.clone().into();
    cache.put("deadbeef", &v).map_err(|e| e.to_string())?;
    let path = cache.path("deadbeef");
    let mut raw = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mid = raw.len() / 2;
    raw[mid] ^= 0x01;
    std::fs::write(&path, raw).map_err(|e| e.to_string())?;
    match cache.get("deadbeef") {
        Err(PipelineError::CacheCorrupt { .. }) => {}
        other => return Err(format!("corrupt cache entry gave {other:?}")),
    }
    Ok("38-byte blob exact; blob, dataset, analysis, manifest, selection roundtrip; CacheCorrupt".into())
}

fn main() {
    let criteria: [(u32, &str, Duration, fn() -> Check); 11] = [
        (1, "conservation", Duration::from_secs(10), criterion_1),
        (2, "lrp-0 equals gradient x input", Duration::from_secs(5), criterion_2),
        (3, "rule identities", Duration::from_secs(1), criterion_3),
        (4, "batch norm canonizer", Duration::from_secs(5), criterion_4),
        (5, "integrated gradients completeness", Duration::from_secs(5), criterion_5),
        (6, "occlusion oracle", Duration::from_secs(5), criterion_6),
        (7, "spectral pipeline", Duration::from_secs(30), criterion_7),
        (8, "t-sne", Duration::from_secs(60), criterion_8),
        (9, "pipeline cache", Duration::from_secs(30), criterion_9),
        (10, "watermark end to end", Duration::from_secs(600), criterion_10),
        (11, "formats", Duration::from_secs(5), criterion_11),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, limit, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let (ok, detail) = match result {
            Ok(d) if took <= limit => (true, d),
            Ok(d) => (false, format!("{d}; over the {}s budget", limit.as_secs())),
            Err(d) => (false, d),
        };
        failed += !ok as usize;
        println!(
            "criterion {n:>2} {} {name}: {detail} [{:.2}s]",
            if ok { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
