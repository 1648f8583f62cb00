use std::path::{Path, PathBuf};
use std::process::Command;

use relvis_cli::{
    cmd_analyze, cmd_attribute, cmd_render, cmd_synth, cmd_train, load_projects, AnalyzeOptions, CliError, SynthSpec,
    PROJECT_FILE,
};
use relvis_core::attribution::{AttributionError, CompositeParams};
use relvis_core::spray::{AnalysisParams, SprayError};
use relvis_core::store::{open_project, AttributionStore, DatasetStore, StoreError, Strategy};

fn small_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        n_per_class: 20,
        watermark_fraction: 0.5,
        seed,
    }
}

fn small_params() -> AnalysisParams {
    AnalysisParams {
        knn_k: 5,
        n_eigval: 4,
        kmeans_range: 2..=5,
        tsne_perplexity: 5.0,
        tsne_iters: 100,
        ..Default::default()
    }
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().unwrap() != "run.json" {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

struct Chain {
    data: PathBuf,
    model: PathBuf,
    attr: PathBuf,
}

fn chain(root: &Path, strategy: Strategy, epochs: usize) -> Chain {
    let c = Chain {
        data: root.join("data"),
        model: root.join("model"),
        attr: root.join("attr"),
    };
    cmd_synth(&c.data, &small_spec(0)).unwrap();
    cmd_train(&c.data, &c.model, epochs, 0.01, 0).unwrap();
    cmd_attribute(&c.data, &c.model, &c.attr, "epsilon-gamma-box", &CompositeParams::default(), strategy).unwrap();
    c
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_synth(&dir.path().join("a"), &small_spec(3)).unwrap();
    cmd_synth(&dir.path().join("b"), &small_spec(3)).unwrap();
    cmd_synth(&dir.path().join("c"), &small_spec(4)).unwrap();
    assert_eq!(a.len(), 60);
    assert_eq!(snapshot(&dir.path().join("a")), snapshot(&dir.path().join("b")));
    assert_ne!(snapshot(&dir.path().join("a")), snapshot(&dir.path().join("c")));
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a/run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "synth");
}

#[test]
fn untrained_model_is_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_synth(&data, &SynthSpec::default()).unwrap();
    let s = cmd_train(&data, &dir.path().join("m"), 0, 0.01, 0).unwrap();
    assert!((s.accuracy - 1.0 / 3.0).abs() <= 0.1, "accuracy {}", s.accuracy);
}

#[test]
fn missing_dataset_is_a_store_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_train(&dir.path().join("nothing"), &dir.path().join("m"), 1, 0.01, 0).unwrap_err();
    assert!(matches!(err, CliError::Store(StoreError::Inconsistent(_))), "{err:?}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn full_chain_is_deterministic_and_cached() {
    let dir = tempfile::tempdir().unwrap();
    let c = chain(dir.path(), Strategy::TrueLabel, 2);
    let opts = AnalyzeOptions {
        per_category: true,
        only: Vec::new(),
        data_dir: Some(c.data.clone()),
    };
    let first = cmd_analyze(&c.attr, &dir.path().join("an1"), &small_params(), &opts).unwrap();
    assert_eq!(first.categories.len(), 3);
    assert_eq!(first.stats.total_hits(), 0);
    let warm = cmd_analyze(&c.attr, &dir.path().join("an1"), &small_params(), &opts).unwrap();
    assert_eq!(warm.stats.total_executed(), 0);
    assert_eq!(warm.stats.total_hits(), first.stats.total_executed());

    let again = tempfile::tempdir().unwrap();
    let c2 = chain(again.path(), Strategy::TrueLabel, 2);
    cmd_analyze(&c2.attr, &again.path().join("an1"), &small_params(), &AnalyzeOptions {
        data_dir: Some(c2.data.clone()),
        ..opts
    })
    .unwrap();
    let strip_cache = |v: Vec<(PathBuf, Vec<u8>)>| -> Vec<(PathBuf, Vec<u8>)> {
        v.into_iter()
            .filter(|(p, _)| !p.starts_with("cache") && p.as_os_str() != PROJECT_FILE)
            .collect()
    };
    assert_eq!(
        strip_cache(snapshot(&dir.path().join("an1"))),
        strip_cache(snapshot(&again.path().join("an1")))
    );
    assert_eq!(snapshot(&c.model), snapshot(&c2.model));

    let bundle = open_project(&dir.path().join("an1").join(PROJECT_FILE)).unwrap();
    assert_eq!(bundle.categories(None), vec!["circle", "square", "triangle"]);
    let cat = bundle.analysis("spray").unwrap().category("circle").unwrap();
    assert!(cat.embeddings.contains_key("spectral") && cat.embeddings.contains_key("tsne"));
    assert_eq!(cat.clusterings.len(), 4);
}

/// Labels stay those of the dataset; only the explained output unit follows the prediction.
#[test]
fn predicted_label_strategy_targets_the_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let c = chain(dir.path(), Strategy::TrueLabel, 0);
    let by_pred = dir.path().join("attr-pred");
    cmd_attribute(&c.data, &c.model, &by_pred, "epsilon-gamma-box", &CompositeParams::default(), Strategy::PredictedLabel)
        .unwrap();
    let truth = AttributionStore::open(&c.attr).unwrap();
    let pred = AttributionStore::open(&by_pred).unwrap();
    let data = DatasetStore::open(&c.data).unwrap();
    assert_eq!(pred.label, data.label);
    assert_eq!(pred.prediction, truth.prediction);
    let scores = pred.prediction.to_f64_vec();
    let per = truth.attribution.len() / truth.len();
    let (a, b) = (truth.attribution.to_f64_vec(), pred.attribution.to_f64_vec());
    let mut misclassified = 0;
    for i in 0..truth.len() {
        let row = &scores[i * 3..i * 3 + 3];
        let argmax = (0..3).max_by(|&x, &y| row[x].total_cmp(&row[y]).then(y.cmp(&x))).unwrap();
        let same = a[i * per..(i + 1) * per] == b[i * per..(i + 1) * per];
        if data.label.active(i) == vec![argmax] {
            assert!(same, "sample {i} is classified correctly but its map changed");
        } else {
            misclassified += 1;
            assert!(!same, "sample {i} is misclassified but still explains its true label");
        }
    }
    assert!(misclassified > 0, "an untrained model should misclassify something");
}

#[test]
fn unknown_composite() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    cmd_synth(&data, &small_spec(0)).unwrap();
    cmd_train(&data, &dir.path().join("m"), 0, 0.01, 0).unwrap();
    let err = cmd_attribute(
        &data,
        &dir.path().join("m"),
        &dir.path().join("a"),
        "nope",
        &CompositeParams::default(),
        Strategy::TrueLabel,
    )
    .unwrap_err();
    assert!(matches!(err, CliError::Attribution(AttributionError::UnknownComposite(ref n)) if n == "nope"));
}

#[test]
fn too_small_category() {
    let dir = tempfile::tempdir().unwrap();
    let c = chain(dir.path(), Strategy::TrueLabel, 0);
    let tiny = tempfile::tempdir().unwrap();
    // Five samples of one category through the default n_eigval = 8.
    let attr = AttributionStore::open(&c.attr).unwrap();
    let keep: Vec<usize> = (0..attr.len()).filter(|&i| attr.label.active(i) == vec![1]).take(5).collect();
    let sub = AttributionStore::new(
        attr.attribution.gather_rows(&keep).unwrap(),
        relvis_core::store::Labels::Single(vec![1; 5]),
        attr.prediction.gather_rows(&keep).unwrap(),
    )
    .unwrap();
    sub.write(&tiny.path().join("attr")).unwrap();
    let err = cmd_analyze(&tiny.path().join("attr"), &tiny.path().join("an"), &AnalysisParams::default(), &AnalyzeOptions {
        per_category: true,
        only: Vec::new(),
        data_dir: None,
    })
    .unwrap_err();
    assert!(matches!(err, CliError::Spray(SprayError::TooFewSamples { need: 8, have: 5 })), "{err:?}");
}

fn decode(path: &Path) -> (Vec<u8>, Vec<u8>) {
    let mut d = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(path).unwrap()));
    d.set_transformations(png::Transformations::IDENTITY);
    let mut r = d.read_info().unwrap();
    let palette = r.info().palette.as_ref().expect("indexed image").to_vec();
    let mut buf = vec![0; r.output_buffer_size()];
    let info = r.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (buf, palette)
}

#[test]
fn render_colormaps_share_the_index_plane() {
    let dir = tempfile::tempdir().unwrap();
    let c = chain(dir.path(), Strategy::TrueLabel, 0);
    let out = dir.path().join("png");
    let hot = cmd_render(&c.attr, None, &[0, 7], "coldnhot", "attribution", &out).unwrap();
    let gray = cmd_render(&c.attr, None, &[0, 7], "gray", "attribution", &out).unwrap();
    assert_eq!(hot.len(), 2);
    for (h, g) in hot.iter().zip(&gray) {
        let (hp, hpal) = decode(h);
        let (gp, gpal) = decode(g);
        assert_eq!(hpal.len(), 256 * 3);
        assert_eq!(hp, gp);
        assert_ne!(hpal, gpal);
    }
    let n = AttributionStore::open(&c.attr).unwrap().len();
    let err = cmd_render(&c.attr, None, &[n], "gray", "attribution", &out).unwrap_err();
    assert!(matches!(err, CliError::IndexOutOfRange { index, len } if index == n && len == n));
    let err = cmd_render(&c.attr, None, &[0], "gray", "overlay", &out).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    cmd_render(&c.attr, Some(&c.data), &[0], "gray", "overlay", &out).unwrap();
}

#[test]
fn serve_needs_a_manifest() {
    let err = load_projects(&[]).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    let err = load_projects(&[PathBuf::from("/nonexistent/project.json")]).unwrap_err();
    assert!(matches!(err, CliError::Store(StoreError::Io { .. })));
}

fn relvis(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_relvis")).args(args).env("RUST_LOG", "off").output().unwrap()
}

#[test]
fn binary_exit_codes() {
    assert_eq!(relvis(&["serve"]).status.code(), Some(2));
    assert_eq!(relvis(&[]).status.code(), Some(2));
    assert_eq!(relvis(&["synth"]).status.code(), Some(2));
    assert_eq!(relvis(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(relvis(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    let out = relvis(&["synth", "--out", data.to_str().unwrap(), "--n-per-class", "4"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = relvis(&["synth", "--out", data.to_str().unwrap(), "--watermark-fraction", "2"]);
    assert_eq!(out.status.code(), Some(2));
    let out = relvis(&["train", "--data", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn busy_port_is_a_bind_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = chain(dir.path(), Strategy::TrueLabel, 0);
    let an = dir.path().join("an");
    cmd_analyze(&c.attr, &an, &small_params(), &AnalyzeOptions {
        per_category: true,
        only: vec!["square".into()],
        data_dir: Some(c.data.clone()),
    })
    .unwrap();
    let held = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = held.local_addr().unwrap().port().to_string();
    let manifest = an.join(PROJECT_FILE);
    let out = relvis(&["serve", "--project", manifest.to_str().unwrap(), "--port", &port]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot bind"));
}
