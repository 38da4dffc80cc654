use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ebgmcr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebgmcr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ebgmcr(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path, seed: &str) {
    ok(&[
        "synth", "--components", "3", "--samples", "12", "--snr-db", "30", "--seed", seed, "--d", "16", "--k-max", "2",
        "--out", s(dir),
    ]);
}

fn solve(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["solve", "--data", s(data), "--out", s(out), "--pool", "8", "--seed", "4"];
    args.extend_from_slice(extra);
    ebgmcr(&args)
}

#[test]
fn synth_writes_dataset_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d1");
    ok(&[
        "synth", "--components", "16", "--samples", "64", "--snr-db", "20", "--seed", "1", "--out", s(&d),
    ]);
    for f in ["meta.json", "mixtures.csv", "components.csv", "concentrations.csv", "selection.csv", "manifest.json"] {
        assert!(d.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seeds"][0], 1);
    assert_eq!(manifest["config"]["n_components"], 16);
    assert_eq!(manifest["config"]["snr_db"], 20.0);
}

#[test]
fn synth_usage_errors() {
    let out = ebgmcr(&["synth", "--components", "16", "--samples", "64", "--seed", "1"]);
    assert!(!out.status.success());
    let tmp = tempfile::tempdir().unwrap();
    let out = ebgmcr(&[
        "synth", "--components", "600", "--samples", "8", "--out", s(&tmp.path().join("x")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn solve_outputs_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "2");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for run in [&a, &b] {
        let out = solve(&data, run, &["--max-epochs", "25"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert_eq!(stdout.lines().filter(|l| l.starts_with("band ")).count(), 6, "{stdout}");
    }
    let report = fs::read_to_string(a.join("report.csv")).unwrap();
    assert_eq!(report, fs::read_to_string(b.join("report.csv")).unwrap());
    let mut lines = report.lines();
    assert!(lines.next().unwrap().starts_with("epoch,r2,mse,nmse,usage,active_count,mean_sel_energy,lambda,tau"));
    assert_eq!(lines.count(), 25);
    assert!(a.join("manifest.json").exists());
    let bank: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("checkpoints.json")).unwrap()).unwrap();
    assert_eq!(bank["bands"].as_array().unwrap().len(), 6);
}

#[test]
fn solve_ablation_runs_to_epoch_cap() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "3");
    let out = solve(&data, &tmp.path().join("run"), &["--no-min-energy", "--max-epochs", "30"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("stopped after 30 epochs (MaxEpochs)"), "{stdout}");
}

#[test]
fn solve_config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "5");
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"pool_size": 5, "max_epochs": 4, "batch": 4}"#).unwrap();
    let run = tmp.path().join("run");
    let out = solve(&data, &run, &["--config", s(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["pool_size"], 8);
    assert_eq!(manifest["config"]["max_epochs"], 4);
    assert_eq!(manifest["config"]["batch"], 4);
}

#[test]
fn solve_reports_divergence_with_state_path() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "6");
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"optimizer": {"lr": 1e300}}"#).unwrap();
    let run = tmp.path().join("run");
    let out = solve(&data, &run, &["--config", s(&cfg), "--max-epochs", "50"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("failure_state.json"));
    assert!(run.join("failure_state.json").exists());
}

#[test]
fn solve_missing_dataset_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = solve(&tmp.path().join("nope"), &tmp.path().join("run"), &[]);
    assert!(!out.status.success());
}

#[test]
fn bench_baselines_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "7");
    let runs = tmp.path().join("runs");
    fs::create_dir(&runs).unwrap();
    let csv_path = runs.join("nmf.csv");
    for method in ["nmf", "mcr-als"] {
        let out = ok(&[
            "bench", "--data", s(&data), "--method", method, "--target-r2", "0.9", "--runs", "3", "--seed", "10",
            "--out", s(&csv_path), "--max-iters", "300",
        ]);
        assert!(String::from_utf8_lossy(&out.stdout).contains("success rate"));
    }
    let text = fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("method,n_true,mult,snr_db,r2,ec,success,seed,wall_ms"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    let seeds: Vec<&str> = rows[..3].iter().map(|r| r.split(',').nth(7).unwrap()).collect();
    assert_eq!(seeds, ["10", "11", "12"]);
    assert!(runs.join("nmf.csv.manifest.json").exists());

    let summary = tmp.path().join("summary.csv");
    ok(&["report", "--runs", s(&runs), "--format", "csv", "--out", s(&summary)]);
    let table = fs::read_to_string(&summary).unwrap();
    assert!(table.starts_with("method,n_true,band,n,ec_mean,ec_sd,r2_mean,r2_sd"));
    assert_eq!(table.lines().count(), 3);
    assert!(table.lines().skip(1).all(|l| l.split(',').nth(3) == Some("3")));

    let fig = tmp.path().join("fig.svg");
    ok(&["report", "--runs", s(&csv_path), "--format", "svg", "--out", s(&fig)]);
    let svg = fs::read_to_string(&fig).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("stroke-dasharray"));
}

#[test]
fn bench_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, "8");
    let out_csv = tmp.path().join("r.csv");
    let out = ebgmcr(&["bench", "--data", s(&data), "--method", "pca", "--runs", "1", "--out", s(&out_csv)]);
    assert_eq!(out.status.code(), Some(2));

    fs::remove_file(data.join("components.csv")).unwrap();
    let out = ebgmcr(&["bench", "--data", s(&data), "--method", "nmf", "--runs", "1", "--out", s(&out_csv)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ground-truth"));
}

#[test]
fn report_without_rows_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "method,n_true,mult,snr_db,r2,ec,success,seed,wall_ms,band\n").unwrap();
    let out = ebgmcr(&["report", "--runs", s(&empty), "--out", s(&tmp.path().join("o.csv"))]);
    assert!(!out.status.success());
}
