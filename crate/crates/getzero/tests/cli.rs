use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use getzero::io::{self, DatasetManifest, SplitManifest};
use getzero::pipeline::CategoryEval;

const TINY: &str = r#"{
  "demos": {"steps_per_embodiment": 160},
  "model": {"d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 16},
  "train": {"steps": 20, "batch_size": 8, "eval_every": 10, "val_records": 64},
  "eval": {"episodes": 1, "seeds": 2},
  "ablate": {"seeds": 2, "rows": ["ET", "ET+DFS", "ET+PE+SE+SL"]},
  "fk_probe": {"seeds": 1, "probe_steps": 80},
  "size_sweep": {"sizes": [5, 0], "seeds": 1}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_getzero"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("config.json");
        fs::write(&config, TINY).unwrap();
        Fixture { _dir: dir, root, config }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.root.join(p)
    }

    fn embodiments(&self) -> PathBuf {
        let out = self.path("emb");
        if !out.join(io::SPLITS_FILE).exists() {
            ok(&["gen-embodiments", "--config", s(&self.config), "--out", s(&out)]);
        }
        out.join(io::SPLITS_FILE)
    }

    fn demos(&self) -> PathBuf {
        let splits = self.embodiments();
        let out = self.path("demos");
        if !out.join(io::DATASET_MANIFEST).exists() {
            ok(&["gen-demos", "--config", s(&self.config), "--splits", s(&splits), "--out", s(&out)]);
        }
        out
    }
}

fn same_files(a: &Path, b: &Path, names: &[&str]) {
    for n in names {
        let x = fs::read(a.join(n)).unwrap();
        let y = fs::read(b.join(n)).unwrap();
        assert!(x == y, "{n} differs between reruns");
    }
}

#[test]
fn gen_embodiments_writes_four_disjoint_splits_and_counts() {
    let f = Fixture::new();
    let out = f.path("emb");
    let text = ok(&["gen-embodiments", "--config", s(&f.config), "--out", s(&out)]);
    assert!(text.contains("pre-filter count: 250"), "{text}");
    assert!(text.contains("unmatched vs 236"), "{text}");
    let m: SplitManifest = io::read_json(&out.join(io::SPLITS_FILE)).unwrap();
    assert_eq!(m.pre_filter, 250);
    let names = m.splits.names();
    let mut uniq = names.clone();
    uniq.sort_unstable();
    uniq.dedup();
    assert_eq!(uniq.len(), names.len());
    assert_eq!(names.len(), 70);
    assert!(m.splits.new_geo.iter().all(|g| g.name().ends_with("+ext")));
    assert!(m.splits.new_graph_geo.iter().all(|g| g.name().ends_with("+ext")));

    let again = f.path("emb2");
    ok(&["gen-embodiments", "--config", s(&f.config), "--out", s(&again)]);
    same_files(&out, &again, &[io::SPLITS_FILE, io::EMBODIMENTS_FILE, "enumeration.json", "config.json", "run.json"]);
}

#[test]
fn demos_reload_and_expert_eval_reproduces_demo_metrics() {
    let f = Fixture::new();
    let splits = f.embodiments();
    let demos = f.demos();
    let (manifest, dataset) = io::read_dataset(&demos).unwrap();
    assert_eq!(manifest.record_count, 160 * manifest.embodiments.len());
    assert_eq!(dataset.records.len(), manifest.record_count);
    assert!(manifest.records_per_embodiment.iter().all(|&c| c == 160));

    let again = f.path("demos2");
    ok(&["gen-demos", "--config", s(&f.config), "--splits", s(&splits), "--out", s(&again)]);
    same_files(&demos, &again, &[io::DATASET_BIN, io::DATASET_MANIFEST]);

    // two expert episodes with the demo seed are exactly the demo episodes
    let out = f.path("eval_expert");
    ok(&[
        "eval", "--config", s(&f.config), "--splits", s(&splits), "--policy", "expert", "--out", s(&out),
        "--set", "eval.episodes=2", "--set", "eval.seeds=1", "--set", "eval.seed_base=0",
    ]);
    let evals: Vec<CategoryEval> = io::read_json(&out.join("eval.json")).unwrap();
    let train = evals.iter().find(|e| e.category == "training_graph").unwrap();
    let want = manifest.expert_errors.iter().sum::<f64>() / manifest.expert_errors.len() as f64;
    assert!((train.mean_error - want).abs() < 1e-12, "{} vs {want}", train.mean_error);
}

#[test]
fn train_smoke_writes_loadable_checkpoints_and_log() {
    let f = Fixture::new();
    let demos = f.demos();
    let out = f.path("train");
    ok(&["train", "--config", s(&f.config), "--demos", s(&demos), "--steps", "15", "--out", s(&out)]);
    for n in [io::CHECKPOINT_BEST, io::CHECKPOINT_FINAL] {
        let m = io::read_checkpoint(&out, n).unwrap();
        assert_eq!(m.config().d_model, 8);
    }
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 15);
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(last["step"], 15);
    assert!(last["wall_time"].as_f64().is_some());
    let cfg: serde_json::Value = io::read_json(&out.join("config.json")).unwrap();
    assert_eq!(cfg["train"]["steps"], 15);
    let info: io::RunInfo = io::read_json(&out.join("run.json")).unwrap();
    assert_eq!(info.version, io::version());

    let again = f.path("train2");
    ok(&["train", "--config", s(&f.config), "--demos", s(&demos), "--steps", "15", "--out", s(&again)]);
    same_files(&out, &again, &[io::CHECKPOINT_BEST, io::CHECKPOINT_FINAL, io::MODEL_CONFIG, "train_summary.json"]);

    let ev = f.path("eval_model");
    ok(&["eval", "--config", s(&f.config), "--splits", s(&f.embodiments()), "--checkpoint", s(&out), "--out", s(&ev)]);
    let evals: Vec<CategoryEval> = io::read_json(&ev.join("eval.json")).unwrap();
    assert_eq!(evals.len(), 4);
    assert!(evals.iter().all(|e| e.mean_error.is_finite()));
}

#[test]
fn ablate_table_shape_and_byte_identical_rerun() {
    let f = Fixture::new();
    let splits = f.embodiments();
    let demos = f.demos();
    let a = f.path("ablate");
    let text = ok(&["ablate", "--config", s(&f.config), "--splits", s(&splits), "--demos", s(&demos), "--out", s(&a)]);
    assert!(text.contains("new_graph: ET+PE+SE+SL < ET"), "{text}");
    let csv = fs::read_to_string(a.join("results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "config,row,category,seed,metric");
    // 3 rows x 4 categories x 2 seeds
    assert_eq!(lines.len(), 1 + 3 * 4 * 2);
    let json: serde_json::Value = io::read_json(&a.join("results.json")).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 3);
    assert!(fs::read_to_string(a.join("results.svg")).unwrap().starts_with("<svg"));

    let b = f.path("ablate2");
    ok(&["ablate", "--config", s(&f.config), "--splits", s(&splits), "--demos", s(&demos), "--out", s(&b), "--set", "ablate.threads=1"]);
    same_files(&a, &b, &["results.csv", "results.json", "results.svg"]);
}

#[test]
fn full_grid_has_seven_rows_by_four_categories() {
    let f = Fixture::new();
    let splits = f.embodiments();
    let demos = f.demos();
    let a = f.path("grid");
    ok(&[
        "ablate", "--config", s(&f.config), "--splits", s(&splits), "--demos", s(&demos), "--out", s(&a),
        "--set", "ablate.rows=[]", "--set", "ablate.seeds=1", "--set", "train.steps=2",
    ]);
    let json: serde_json::Value = io::read_json(&a.join("results.json")).unwrap();
    let rows = json["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 7);
    for r in rows {
        assert_eq!(r["categories"].as_object().unwrap().len(), 4);
    }
}

#[test]
fn probe_dfs_and_sweep_commands_write_reports() {
    let f = Fixture::new();
    let splits = f.embodiments();
    let demos = f.demos();
    let common = ["--config", s(&f.config), "--splits", s(&splits), "--demos", s(&demos)];

    let p = f.path("probe");
    ok(&[&["fk-probe"][..], &common, &["--out", s(&p)]].concat());
    let probe: getzero::pipeline::ProbeReport = io::read_json(&p.join("fk_probe.json")).unwrap();
    assert_eq!(probe.means.len(), 3);
    assert!(probe.means.iter().all(|m| m.unseen_error.is_some_and(f64::is_finite)));

    let d = f.path("dfs");
    ok(&[&["dfs-sensitivity"][..], &common, &["--out", s(&d)]].concat());
    let dfs: getzero::pipeline::DfsReport = io::read_json(&d.join("dfs_sensitivity.json")).unwrap();
    assert_eq!(dfs.cells.len(), 2);
    assert!(dfs.degradation.is_some());

    let w = f.path("sweep");
    ok(&[&["size-sweep"][..], &common, &["--out", s(&w)]].concat());
    let csv = fs::read_to_string(w.join("size_sweep.csv")).unwrap();
    assert!(csv.contains("n=5,") && csv.contains("n=40,"), "{csv}");
}

#[test]
fn exit_codes_follow_failure_kind() {
    let f = Fixture::new();
    let out = f.path("x");

    let bad = f.path("bad.json");
    fs::write(&bad, r#"{"train": {"stpes": 3}}"#).unwrap();
    assert_eq!(run(&["gen-embodiments", "--config", s(&bad), "--out", s(&out)]).status.code(), Some(2));
    assert_eq!(run(&["gen-embodiments", "--out", s(&out), "--set", "task.episode_length=7"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));

    let missing = f.path("nowhere/splits.json");
    let o = run(&["gen-demos", "--splits", s(&missing), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
    assert_eq!(run(&["gen-embodiments", "--config", s(&f.path("none.json")), "--out", s(&out)]).status.code(), Some(3));

    // a learning rate this large drives the loss to infinity
    let demos = f.demos();
    let o = run(&[
        "train", "--config", s(&f.config), "--demos", s(&demos), "--out", s(&out),
        "--set", "train.lr=1e300", "--set", "train.steps=50",
    ]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn manifest_records_config_hash() {
    let f = Fixture::new();
    let demos = f.demos();
    let m: DatasetManifest = io::read_json(&demos.join(io::DATASET_MANIFEST)).unwrap();
    assert_eq!(m.config_hash.len(), 64);
    assert_eq!(m.format_version, io::DATASET_FORMAT_VERSION);
}
