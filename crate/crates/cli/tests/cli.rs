use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn voldiff(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_voldiff"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    out
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = voldiff(args, cwd);
    assert!(
        out.status.success(),
        "voldiff {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

const SMALL: &str = r#"
run_id = "smoke"
mode = "patchddm"
run_dir = "run"

[model]
base_width = 8
channel_multipliers = [1, 2, 2]

[data]
dir = "data"
n_cases = 10
extent = 32

[train]
patch_extent = 16
steps = 50
eval_every = 25
eval_sampling_steps = 5
eval_cases = 1

[sample]
steps = [5]
ensemble_sizes = [1, 2]
max_cases = 1
"#;

#[test]
fn generate_is_reproducible_and_splits_by_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let first = ok(&["generate", "--data-dir", "a", "--set", "data.extent=16"], d);
    let second = ok(&["generate", "--data-dir", "b", "--set", "data.extent=16"], d);
    let hash = |s: &str| s.split("sha256 ").nth(1).unwrap().trim().to_string();
    assert_eq!(hash(&first), hash(&second));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("a/manifest.json")).unwrap()).unwrap();
    let cases = m["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 100);
    let count = |s: &str| cases.iter().filter(|c| c["split"] == s).count();
    assert_eq!((count("train"), count("val"), count("test")), (80, 10, 10));
    let other = ok(&["generate", "--data-dir", "c", "--seed", "1", "--set", "data.extent=16"], d);
    assert_ne!(hash(&first), hash(&other));
}

#[test]
fn bad_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.toml"), "[train]\nlearning_rate = 0.1\n").unwrap();
    let out = voldiff(&["--config", "bad.toml", "bench"], d);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!voldiff(&["bench", "--mode", "quarterres"], d).status.success());
    // training without a dataset
    assert!(!voldiff(&["train", "--data-dir", "missing"], d).status.success());
}

#[test]
fn full_pipeline_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.toml"), SMALL).unwrap();
    let cfg = ["--config", "run.toml"];
    ok(&[&cfg[..], &["generate"]].concat(), d);
    let trained = ok(&[&cfg[..], &["train"]].concat(), d);
    assert!(trained.contains("trained to step 50"), "{trained}");

    let run = d.join("run");
    assert_eq!(header(&run.join("metrics.csv")), "step,split,dice,hd95");
    assert_eq!(header(&run.join("loss.csv")), "step,loss");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("25,val,") && rows[1].starts_with("50,val,"));
    let best: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("best.json")).unwrap()).unwrap();
    let dice_of = |r: &str| r.split(',').nth(2).unwrap().parse::<f64>().unwrap();
    let top = rows.iter().map(|r| dice_of(r)).fold(f64::MIN, f64::max);
    // the CSV rounds to six decimals
    assert!((best["dice"].as_f64().unwrap() - top).abs() <= 5e-7);
    assert!(run.join("best.ckpt").exists() && run.join("last.ckpt").exists());

    // first loss with the zero-initialized output layer is the noise energy
    let losses = fs::read_to_string(run.join("loss.csv")).unwrap();
    let first: f64 = losses.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((first - 1.0).abs() < 0.1, "{first}");

    ok(&[&cfg[..], &["sample"]].concat(), d);
    assert_eq!(header(&run.join("sweep.csv")), "run_id,case_id,mode,ensemble_size,steps,dice,hd95");
    let sweep = fs::read_to_string(run.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2);
    let single = run.join("samples/steps5_ens1");
    for part in ["mask", "mean", "variance"] {
        assert!(single.join(format!("case-0009.{part}.vol.json")).exists(), "{part}");
        assert!(single.join(format!("case-0009.{part}.vol.raw")).exists(), "{part}");
    }
    // one member: the variance map is identically zero
    let raw = fs::read(single.join("case-0009.variance.vol.raw")).unwrap();
    assert!(raw.iter().all(|&b| b == 0));

    let evaluated = ok(&[&cfg[..], &["eval"]].concat(), d);
    assert_eq!(evaluated.lines().count(), 2);
    let eval_csv = fs::read_to_string(single.join("metrics.csv")).unwrap();
    let sweep_row = sweep.lines().find(|l| l.contains(",1,5,")).unwrap();
    assert_eq!(eval_csv.lines().nth(1).unwrap(), sweep_row);

    // resuming continues the step count and appends to the CSVs
    let resumed = ok(&[&cfg[..], &["train", "--steps", "60", "--resume", "run/last.ckpt"]].concat(), d);
    assert!(resumed.contains("trained to step 60"), "{resumed}");
    let losses = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 1 + 60);
    assert_eq!(losses.lines().last().unwrap().split(',').next().unwrap(), "60");
}

#[test]
fn sample_sweep_grid_has_one_row_per_pair() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tiny = r#"
run_dir = "run"
[model]
base_width = 4
channel_multipliers = [1, 2]
blocks_per_level = 1
[data]
dir = "data"
n_cases = 3
extent = 8
fractions = [0.34, 0.33, 0.33]
[train]
patch_extent = 4
steps = 2
eval_every = 2
eval_sampling_steps = 2
[sample]
steps = [10, 20, 50, 100]
ensemble_sizes = [1, 3, 5]
"#;
    fs::write(d.join("t.toml"), tiny).unwrap();
    let cfg = ["--config", "t.toml"];
    ok(&[&cfg[..], &["generate"]].concat(), d);
    ok(&[&cfg[..], &["train"]].concat(), d);
    ok(&[&cfg[..], &["sample", "--checkpoint", "run/last.ckpt"]].concat(), d);
    let sweep = fs::read_to_string(d.join("run/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 12);
    let ens1: Vec<&str> = sweep.lines().filter(|l| l.split(',').nth(3) == Some("1")).collect();
    assert_eq!(ens1.len(), 4);
}

#[test]
fn bench_reports_every_mode_and_phase() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(
        &[
            "bench",
            "--run-dir",
            "b",
            "--set",
            "bench.extent=16",
            "--set",
            "bench.patch_extent=8",
            "--set",
            "bench.repeats=1",
            "--set",
            "model.base_width=4",
        ],
        d,
    );
    let csv = fs::read_to_string(d.join("b/bench.csv")).unwrap();
    assert_eq!(out.trim(), csv.trim());
    assert_eq!(header(&d.join("b/bench.csv")), "mode,phase,input_extent,seconds,peak_bytes,flops");
    let rows: Vec<Vec<String>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    assert_eq!(rows.len(), 6);
    let flops = |mode: &str, phase: &str| -> f64 {
        rows.iter().find(|r| r[0] == mode && r[1] == phase).unwrap()[5].parse().unwrap()
    };
    assert!(flops("patchddm", "train") < flops("fullres", "train"));
    assert_eq!(flops("patchddm", "inference"), flops("fullres", "inference"));
    let ratio = flops("halfres", "inference") / flops("fullres", "inference");
    assert!((1.0 / 8.5..=1.0 / 7.5).contains(&ratio), "{ratio}");
    for r in &rows {
        assert!(r[4].parse::<u64>().unwrap() > 0, "{r:?}");
    }
}
