//! End-to-end runs of the `cotrain` binary on small phantoms.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use cotrain::metrics::MetricsReport;
use cotrain::nets::{build_dual, BranchAssignment, ModelConfig, Variant};
use cotrain::phantom::{generate_case, PhantomSpec};
use cotrain::volume::io::load_labels;
use cotrain::volume::{preprocess, Shape3};

fn cotrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotrain"))
        .args(args)
        .env("SOURCE_DATE_EPOCH", "1700000000")
        .env("COTRAIN_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cotrain(args);
    assert!(
        out.status.success(),
        "cotrain {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Relative path → bytes for every file under `dir`.
fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

fn generate(dir: &Path, cases: &str) {
    ok(&["generate", "--cases", cases, "--seed", "11", "--shape", "8,16,16", "--out", p(dir)]);
}

#[test]
fn generate_is_reproducible_and_writes_a_split() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a, "6");
    generate(&b, "6");
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (k, v) in &ta {
        if k != "run_manifest.json" {
            assert_eq!(v, &tb[k], "{k} differs");
        }
    }
    let manifest: serde_json::Value = serde_json::from_slice(&ta["run_manifest.json"]).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert_eq!(manifest["seeds"]["phantom"], 11);
    assert_eq!(manifest["started_unix"], 1700000000);
    let split: serde_json::Value = serde_json::from_slice(&ta["split.json"]).unwrap();
    let total: usize = ["train", "validation", "test"]
        .iter()
        .map(|k| split[k].as_array().unwrap().len())
        .sum();
    assert_eq!(total, 6);
}

#[test]
fn too_few_cases_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cotrain(&["generate", "--cases", "4", "--out", p(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("at least 5"));
}

#[test]
fn unknown_variant_lists_the_valid_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cotrain(&["train", "--data", p(tmp.path()), "--out", p(tmp.path()), "--variant", "bogus"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for v in ["par", "mix", "mix_reco"] {
        assert!(err.contains(v), "{v} missing from: {err}");
    }
}

#[test]
fn deterministic_training_repeats_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "5");
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "train", "--data", p(&data), "--out", p(&out), "--folds", "1", "--deterministic", "--seed", "3",
            "--lr", "1e-3", "--max-epochs", "2", "--base-filters", "2", "--depth", "2",
        ]);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["train_log.csv", "epochs.csv", "report.json"] {
        let x = std::fs::read(a.join(f)).unwrap();
        assert!(!x.is_empty());
        assert_eq!(x, std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    assert!(a.join("best.ckpt").exists() && a.join("stage1_best.ckpt").exists());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["deterministic"], true);
    assert_eq!(manifest["seeds"]["training"], 3);
    assert!(manifest["input_hashes"].as_object().unwrap().keys().any(|k| k.ends_with("split.json")));

    // The trained checkpoint evaluates through the CLI as well.
    let eval = tmp.path().join("eval");
    ok(&[
        "evaluate", "--data", p(&data), "--checkpoint", p(&a.join("best.ckpt")), "--out", p(&eval),
        "--export-slices",
    ]);
    assert!(MetricsReport::load(&eval.join("report.json")).is_ok());
    assert!(eval.join("slices").read_dir().unwrap().next().is_some());
}

#[test]
fn ground_truth_bypass_scores_perfectly_and_compare_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate(&data, "6");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["evaluate", "--data", p(&data), "--ground-truth-bypass", "--subset", "all", "--out", p(dir)]);
    }
    let report = MetricsReport::load(&a.join("report.json")).unwrap();
    assert_eq!(report.mean_foreground_dsc(), 1.0);
    let table = std::fs::read_to_string(a.join("report.txt")).unwrap();
    assert!(table.contains("Zones Avg."));

    let cmp = tmp.path().join("cmp");
    let out = ok(&["compare", "--a", p(&a.join("report.json")), "--b", p(&b.join("report.json")), "--out", p(&cmp)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("degenerate"));
    assert!(cmp.join("comparison.json").exists() && cmp.join("comparison.txt").exists());
}

#[test]
fn postprocess_turns_saved_outputs_into_clean_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let (img, _) = generate_case(&PhantomSpec::default().with_seed(4).with_shape(Shape3::new(8, 16, 16))).unwrap();
    let model = build_dual(
        &ModelConfig {
            base_filters: 2,
            depth: 2,
            ..ModelConfig::default()
        },
        Variant::MixReco,
    )
    .unwrap();
    let out = model.forward(&preprocess(&img).unwrap().volume).unwrap();
    let input = tmp.path().join("pred.json");
    out.save(&input, &BranchAssignment::default()).unwrap();
    let labels = tmp.path().join("labels").join("pred.nii.gz");
    ok(&["postprocess", "--input", p(&input), "--out", p(&labels)]);
    let lm = load_labels(&labels).unwrap();
    assert_eq!(lm.shape(), Shape3::new(8, 16, 16));
    assert!(tmp.path().join("labels").join("run_manifest.json").exists());
}

#[test]
fn environment_variables_set_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_cotrain"))
        .args(["generate", "--shape", "8,16,16", "--seed", "11"])
        .env("COTRAIN_OUT", tmp.path())
        .env("COTRAIN_CASES", "5")
        .env("COTRAIN_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("split.json").exists());
}
