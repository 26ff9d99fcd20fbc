//! End-to-end runs of the `ram` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn ram(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ram")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ram(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Exit code and error category of a failing run.
fn failure(args: &[&str]) -> (i32, String, String) {
    let out = ram(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap_or_else(|_| panic!("not JSON: {stderr}"));
    let err = &v["error"];
    (
        out.status.code().unwrap(),
        err["category"].as_str().unwrap().to_string(),
        err["message"].as_str().unwrap().to_string(),
    )
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().display().to_string(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    v.sort();
    v
}

/// A generated dataset and a one-epoch-per-stage training run, shared by the tests.
struct Fixture {
    _root: TempDir,
    data: PathBuf,
    manifest: PathBuf,
    run: PathBuf,
}

const FAST: [&str; 4] = ["--set", "train.epochs=1", "--set", "train.lr=0.01"];

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("data");
        let run = root.path().join("run");
        ok(&["gen-synthetic", "--seed", "3", "--out", p(&data)]);
        let manifest = data.join("manifest.csv");
        let mut args = vec!["train", "--seed", "3", "--manifest", p(&manifest), "--out", p(&run)];
        args.extend(FAST);
        ok(&args);
        Fixture { _root: root, data, manifest, run }
    })
}

#[test]
fn gen_synthetic_writes_the_requested_rows() {
    let f = fixture();
    let rows = fs::read_to_string(&f.manifest).unwrap().lines().count() - 1;
    assert_eq!(rows, 20 * 10);
    assert_eq!(fs::read_dir(f.data.join("images")).unwrap().count(), 200);
    for file in ["synthetic.txt", "config.txt"] {
        assert!(f.data.join(file).is_file(), "{file} missing");
    }
    let config = fs::read_to_string(f.data.join("config.txt")).unwrap();
    assert!(config.contains("run.seed = 3"), "{config}");
}

#[test]
fn gen_synthetic_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["gen-synthetic", "--seed", "11", "--set", "synthetic.num_ids=6", "--set", "synthetic.num_test_ids=2", "--out", p(&a)]);
    ok(&["gen-synthetic", "--seed", "11", "--set", "synthetic.num_ids=6", "--set", "synthetic.num_test_ids=2", "--out", p(&b)]);
    ok(&["gen-synthetic", "--seed", "12", "--set", "synthetic.num_ids=6", "--set", "synthetic.num_test_ids=2", "--out", p(&c)]);
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn invalid_configs_exit_with_the_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let (code, cat, msg) = failure(&["gen-synthetic", "--set", "synthetic.num_ids=0", "--out", p(&out)]);
    assert_eq!((code, cat.as_str()), (2, "config"), "{msg}");

    let (code, cat, msg) = failure(&["gen-synthetic", "--set", "synthetic.colours=3", "--out", p(&out)]);
    assert_eq!((code, cat.as_str()), (2, "config"));
    assert!(msg.contains("synthetic.colours"), "{msg}");

    let file = dir.path().join("bad.txt");
    fs::write(&file, "run.seed = 1\ntrain.epochz = 3\n").unwrap();
    let (code, _, msg) = failure(&["gen-synthetic", "--config", p(&file), "--out", p(&out)]);
    assert_eq!(code, 2);
    assert!(msg.contains("train.epochz"), "{msg}");

    let (code, cat, _) = failure(&["train", "--out", p(&out)]);
    assert_eq!((code, cat.as_str()), (2, "config"));
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let (code, cat, _) = failure(&["train", "--manifest", p(&dir.path().join("none.csv")), "--out", p(&dir.path().join("o"))]);
    assert_eq!((code, cat.as_str()), (4, "io"));
}

#[test]
fn train_writes_one_checkpoint_per_stage() {
    let f = fixture();
    assert_eq!(names(&f.run), ["BN", "BN+R", "RAM", "baseline", "config.txt", "train_log.jsonl"]);
    let log = fs::read_to_string(f.run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
    let config = fs::read_to_string(f.run.join("config.txt")).unwrap();
    assert!(config.contains("train.stage_epochs = 1,1,1,1") && config.contains("model.num_ids = 10"), "{config}");
}

#[test]
fn conv_only_stage_writes_one_checkpoint() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--seed", "3", "--stage", "conv-only", "--manifest", p(&f.manifest), "--out", p(dir.path())];
    args.extend(FAST);
    ok(&args);
    assert_eq!(names(dir.path()), ["baseline", "config.txt", "train_log.jsonl"]);
    // The baseline stage is the same computation as in the full run.
    assert_eq!(tree(&dir.path().join("baseline")), tree(&f.run.join("baseline")));
}

#[test]
fn rerunning_from_the_resolved_config_reproduces_checkpoints() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let config = f.run.join("config.txt");
    ok(&["train", "--config", p(&config), "--out", p(dir.path())]);
    for stage in ["baseline", "BN", "BN+R", "RAM"] {
        assert_eq!(tree(&dir.path().join(stage)), tree(&f.run.join(stage)), "{stage}");
    }
    assert_eq!(
        fs::read(dir.path().join("train_log.jsonl")).unwrap(),
        fs::read(f.run.join("train_log.jsonl")).unwrap()
    );
}

#[test]
fn evaluate_baseline_with_one_selection() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    ok(&["evaluate", "--checkpoint", p(&f.run.join("baseline")), "--manifest", p(&f.manifest), "--selections", "f_c", "--out", p(dir.path())]);
    assert_eq!(names(dir.path()), ["ablation.csv", "ablation.md", "config.txt", "metrics_f_c.json"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("metrics_f_c.json")).unwrap()).unwrap();
    let map = report["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert_eq!(report["cmc"].as_array().unwrap().len(), 10);
    assert_eq!(report["protocol"]["kind"], "fixed_split");
    assert!(report["seed"].is_u64());
}

#[test]
fn evaluate_full_model_with_four_selections() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    ok(&["evaluate", "--checkpoint", p(&f.run.join("RAM")), "--manifest", p(&f.manifest), "--out", p(dir.path())]);
    let reports: Vec<String> = names(dir.path()).into_iter().filter(|n| n.starts_with("metrics_")).collect();
    assert_eq!(
        reports,
        ["metrics_f_c+f_b+f_r+f_a.json", "metrics_f_c+f_b+f_r.json", "metrics_f_c+f_b.json", "metrics_f_c.json"]
    );
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "model,feature,dim,map,top1,top5");
    assert_eq!(rows.len(), 5);
    assert!(rows[4].starts_with("RAM,[f_c;f_b;f_r;f_a],"), "{csv}");
}

#[test]
fn attribute_features_from_baseline_are_rejected() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let (code, cat, msg) = failure(&["evaluate", "--checkpoint", p(&f.run.join("baseline")), "--manifest", p(&f.manifest), "--selections", "f_a", "--out", p(&out)]);
    assert_eq!((code, cat.as_str()), (7, "eval"));
    assert!(msg.contains("attribute"), "{msg}");
    assert!(!out.exists());
}

#[test]
fn extract_writes_feature_tables() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    ok(&["extract", "--checkpoint", p(&f.run.join("BN")), "--manifest", p(&f.manifest), "--selections", "f_c,[f_c;f_b]", "--out", p(dir.path())]);
    let table = fs::read(dir.path().join("features_f_c+f_b.ramf")).unwrap();
    assert_eq!(&table[..4], b"RAMF");
    let count = u64::from_le_bytes(table[4..12].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(table[12..20].try_into().unwrap()) as usize;
    assert_eq!(count, 100);
    assert_eq!(table.len(), 20 + 8 * count * dim);
    let sidecar = fs::read_to_string(dir.path().join("features_f_c+f_b.ramf.rows.csv")).unwrap();
    assert_eq!(sidecar.lines().count(), count + 1);
    assert!(dir.path().join("features_f_c.ramf").is_file());
}

#[test]
fn ablate_runs_the_pipeline_with_random_gallery() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "ablate", "--seed", "5", "--out", p(dir.path()), "--protocol", "random_gallery", "--trials", "2",
        "--set", "synthetic.num_ids=8", "--set", "synthetic.num_test_ids=4", "--set", "synthetic.images_per_id=4",
        "--set", "train.epochs=1",
    ]);
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    // baseline: f_c; BN: 2; BN+R: 3; RAM: 4
    assert_eq!(csv.lines().count(), 1 + 1 + 2 + 3 + 4, "{csv}");
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("metrics/RAM/metrics_f_c+f_b+f_r+f_a.json")).unwrap()).unwrap();
    assert_eq!(report["per_trial"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("data/manifest.csv").is_file());
    assert!(dir.path().join("config.txt").is_file());
}
