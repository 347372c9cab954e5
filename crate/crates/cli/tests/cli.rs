use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 1
patch_resolution = 12

[hyperparameters]
epochs = 2
conf_threshold = 0.05

[dataset]
n_train = 48
n_test = 16

[detector.toy]
epochs = 1
required_ap = 0.0
"#;

fn appa(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_appa"))
        .args(args)
        .env("APPA_OUT_ROOT", out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.toml");
    std::fs::write(&config, SMALL).unwrap();
    let f = Fixture {
        root,
        config: config.to_str().unwrap().to_string(),
        _dir: dir,
    };
    ok(&appa(&["train-detector", "--config", &f.config], &f.root));
    f
}

fn run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.join("config.toml").exists())
        .collect();
    v.sort();
    v
}

#[test]
fn missing_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = appa(&["train-patch", "--config", "/nonexistent/cfg.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(appa(&["frobnicate"], dir.path()).status.code(), Some(2));
}

#[test]
fn bad_config_value_exits_3_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[hyperparameters]\nalpha = -1.0\n").unwrap();
    let o = appa(&["train-patch", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hyperparameters.alpha"));
}

#[test]
fn missing_detector_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let o = appa(&["train-patch", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn train_patch_writes_every_artifact() {
    let f = fixture();
    ok(&appa(&["train-patch", "--config", &f.config, "--placement", "outside"], &f.root));
    let runs = run_dirs(&f.root);
    assert_eq!(runs.len(), 1);
    let run = &runs[0];
    for a in ["patch.png", "patch.json", "loss.csv", "checkpoints/latest.ckpt"] {
        let p = run.join(a);
        assert!(std::fs::metadata(&p).map(|m| m.len() > 0).unwrap_or(false), "{}", p.display());
    }
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("patch.json")).unwrap()).unwrap();
    assert_eq!(meta["placement"]["mode"], "outside_target");
    let hash = run.file_name().unwrap().to_str().unwrap();
    assert_eq!(meta["config_hash"], hash);

    // Resuming from the last checkpoint of a finished run changes nothing.
    let before = std::fs::read(run.join("patch.json")).unwrap();
    let ckpt = run.join("checkpoints/latest.ckpt");
    ok(&appa(
        &["train-patch", "--config", &f.config, "--placement", "outside", "--resume", ckpt.to_str().unwrap()],
        &f.root,
    ));
    assert_eq!(std::fs::read(run.join("patch.json")).unwrap(), before);
}

#[test]
fn benchmark_and_report() {
    let f = fixture();
    ok(&appa(&["train-patch", "--config", &f.config], &f.root));
    let o = appa(&["benchmark", "--config", &f.config], &f.root);
    ok(&o);
    let run = &run_dirs(&f.root)[0];
    let reports = run.join("reports");
    let csv = std::fs::read_to_string(reports.join("benchmark_matrix_on_target.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.lines().nth(1).unwrap().ends_with('*'));
    for p in ["benchmark_pr_on_target.png", "benchmark_heatmap_on_target.png"] {
        assert!(std::fs::metadata(reports.join(p)).unwrap().len() > 0);
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(reports.join("benchmark.json")).unwrap()).unwrap();
    assert_eq!(report["config_hash"], run.file_name().unwrap().to_str().unwrap());

    let r = reports.to_str().unwrap();
    ok(&appa(&["report", "--reports", r], &f.root));
    let first = std::fs::read(reports.join("benchmark.tables.txt")).unwrap();
    ok(&appa(&["report", "--reports", r], &f.root));
    assert_eq!(std::fs::read(reports.join("benchmark.tables.txt")).unwrap(), first);
    assert!(String::from_utf8_lossy(&first).contains('*'));

    // Tamper with a derived value; the report recomputes and flags it.
    let path = reports.join("benchmark.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    v["summaries"][0]["modes"][0]["ap_drop"] = serde_json::json!(123.456);
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    let o = appa(&["report", "--reports", r], &f.root);
    ok(&o);
    let tables = std::fs::read_to_string(reports.join("benchmark.tables.txt")).unwrap();
    assert!(tables.contains("ap_drop stored Some(123.456)"), "{tables}");
    assert!(!tables.contains("123.46 "));
}

#[test]
fn benchmark_with_missing_target_marks_it_unavailable() {
    let f = fixture();
    ok(&appa(&["train-patch", "--config", &f.config], &f.root));
    let run = &run_dirs(&f.root)[0];
    let det = std::fs::read_dir(f.root.join("detectors")).unwrap().next().unwrap().unwrap().path();
    let patch = run.join("patch.json");
    let o = appa(
        &[
            "benchmark",
            "--config",
            &f.config,
            "--patch",
            &format!("toy={}", patch.display()),
            "--target",
            &format!("toy={}", det.display()),
            "--target",
            "toy:missing=/nonexistent.bin",
        ],
        &f.root,
    );
    ok(&o);
    let csv = std::fs::read_to_string(run.join("reports/benchmark_matrix_on_target.csv")).unwrap();
    assert!(csv.contains(",unavailable"), "{csv}");
}

#[test]
fn empty_report_dir_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = appa(&["report", "--reports", dir.path().to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn sweep_and_gen_data() {
    let f = fixture();
    ok(&appa(&["train-patch", "--config", &f.config], &f.root));
    let o = appa(
        &["sweep", "--config", &f.config, "--angles=-20,0,20", "--scales", "0.8,1,1.2", "--brightness", "0"],
        &f.root,
    );
    ok(&o);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().count(), 10, "{out}");
    ok(&appa(&["gen-data", "--config", &f.config], &f.root));
    let data = std::fs::read_dir(f.root.join("data")).unwrap().next().unwrap().unwrap().path();
    assert!(data.join("train/manifest.json").exists());
    assert!(data.join("test/manifest.json").exists());
}
