use std::fs;
use std::path::Path;
use std::process::Command;

use esnmpc_cli::run;

const CONFIG: &str = r#"
seeds = [0, 1]

[plant]
id = "spring_mass"

[data]
seed = 3
train_steps = 3000
validation_steps = 600

[model]
family = "dmdc"
delays = 1
beta = 1e-9

[mpc]
control_center = 0.5

[reference]
set_points = [[-0.5], [0.5]]
durations = [5.0, 5.0]
"#;

fn setup(dir: &Path, extra: &str) -> String {
    let path = dir.join("run.toml");
    let out = dir.join("out");
    fs::write(&path, format!("out = {:?}\n{CONFIG}{extra}", out.display().to_string())).unwrap();
    path.display().to_string()
}

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("esnmpc").chain(args.iter().copied()))
}

#[test]
fn full_pipeline_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "");
    let out = tmp.path().join("out");
    assert_eq!(cli(&["gen-data", "--config", &cfg]), 0);
    assert!(out.join("data/train/states.csv").is_file());
    assert!(out.join("data/validation/meta.json").is_file());
    assert!(out.join("config.toml").is_file());

    assert_eq!(cli(&["train", "--config", &cfg, "--workers", "2"]), 0);
    assert!(out.join("models/dmdc_0/model.txt").is_file());
    assert!(out.join("models/dmdc_1/config.toml").is_file());

    assert_eq!(cli(&["forecast", "--config", &cfg]), 0);
    let errors = fs::read_to_string(out.join("forecast/dmdc_0/errors.csv")).unwrap();
    assert!(errors.starts_with("step,window,start,error\n"));
    assert_eq!(errors.lines().count(), 1 + 8 * 50);

    assert_eq!(cli(&["control", "--config", &cfg, "--workers", "2"]), 0);
    let log = fs::read_to_string(out.join("control/dmdc_1/log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 100);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("control/dmdc_0/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["label"], "dmdc");
    assert_eq!(summary["steps"], 100);

    let glob = format!("{}/control/dmdc_*/summary", out.display());
    assert_eq!(cli(&["report", "--glob", &glob]), 0);
    let table = esnmpc_cli::report::run(&[glob]).unwrap();
    assert!(table.lines().nth(2).unwrap().starts_with("| dmdc | 2 |"));
}

#[test]
fn stages_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let d = dir.display().to_string();
        assert_eq!(cli(&["gen-data", "--config", &cfg, "--out", &d]), 0);
        assert_eq!(cli(&["control", "--config", &cfg, "--out", &d, "--seed", "1"]), 0);
    }
    for rel in ["data/train/states.csv", "data/train/controls.csv", "data/validation/states.csv", "models/dmdc_1/model.txt", "control/dmdc_1/log.csv"] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel} differs");
    }
}

#[test]
fn sweep_selection_feeds_training() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = "\n[sweep]\nseed = 4\n[[sweep.axes]]\nname = \"delays\"\nvalues = [0, 1, 2]\n";
    let cfg = setup(tmp.path(), extra);
    let out = tmp.path().join("out");
    assert_eq!(cli(&["train", "--config", &cfg]), 2, "training before the sweep is a runtime failure");
    assert_eq!(cli(&["sweep", "--config", &cfg, "--workers", "3"]), 0);
    let csv = fs::read_to_string(out.join("sweep/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(out.join("sweep/selection.json").is_file());
    assert_eq!(cli(&["train", "--config", &cfg, "--seeds", "5..7"]), 0);
    assert!(out.join("models/dmdc_5/model.txt").is_file());
    assert!(out.join("models/dmdc_6/model.txt").is_file());
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["frobnicate"]), 1);
    assert_eq!(cli(&["train"]), 1);
    let missing = tmp.path().join("missing.toml").display().to_string();
    assert_eq!(cli(&["train", "--config", &missing]), 1);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[plant]\nid = \"pendulum\"\n").unwrap();
    assert_eq!(cli(&["gen-data", "--config", &bad.display().to_string()]), 1);
    let cfg = setup(tmp.path(), "");
    assert_eq!(cli(&["train", "--config", &cfg, "--seeds", "4..2"]), 1);
    assert_eq!(cli(&["report", "--glob", &format!("{}/nothing/*", tmp.path().display())]), 2);
}

#[test]
fn binary_reports_missing_config_path() {
    let out = Command::new(env!("CARGO_BIN_EXE_esnmpc"))
        .args(["gen-data", "--config", "/nonexistent/run.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/run.toml"));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        esnmpc_cli::config::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e:#}", path.display()));
        n += 1;
    }
    assert!(n >= 3);
}
