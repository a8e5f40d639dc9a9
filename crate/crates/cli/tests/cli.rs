use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn fednoise(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fednoise"));
    cmd.args(args);
    match threads {
        Some(n) => cmd.env("FEDNOISE_THREADS", n),
        None => cmd.env_remove("FEDNOISE_THREADS"),
    };
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, json).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"{
  "clients": 4,
  "rounds": 3,
  "local_epochs": 2,
  "dirichlet_alpha": 1.0,
  "dataset": {"class_count": 4, "dim": 8, "per_class": 40},
  "model": {"hidden": [16]},
  "seed": 5
}"#;

fn with_method(method: &str) -> String {
    SMALL.replacen('{', &format!("{{\n  \"method\": \"{method}\","), 1)
}

fn csv_rows(dir: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(dir.join("metrics.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

#[test]
fn run_writes_all_outputs() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL);
    let out = tmp.path().join("out");
    let o = fednoise(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], Some("2"));
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&out);
    assert_eq!(
        rows[0].join(","),
        "round,accuracy,test_ce,mean_L1,mean_L2,mean_L3,noise_retained,noise_mean_iters,wall_ms"
    );
    assert_eq!(rows.len(), 4);
    for (i, r) in rows[1..].iter().enumerate() {
        assert_eq!(r[0], (i + 1).to_string());
        let acc: f64 = r[1].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(r[2].parse::<f64>().unwrap() > 0.0);
        assert!(r[4].parse::<f64>().unwrap() > 0.0, "self-distillation KL reported");
        assert!(r[6].parse::<usize>().unwrap() > 0, "noise retained");
    }
    let model = std::fs::read(out.join("final_model.fsnd")).unwrap();
    assert_eq!(&model[..4], b"FSND");
    let echoed = std::fs::read_to_string(out.join("effective_config.json")).unwrap();
    assert!(echoed.contains("\"threshold\""));
    assert!(echoed.contains("\"participant_fraction\""));
}

#[test]
fn fedavg_has_zero_distillation_columns() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &with_method("fedavg"));
    let out = tmp.path().join("out");
    let o = fednoise(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], Some("1"));
    assert!(o.status.success(), "{}", stderr(&o));
    for r in &csv_rows(&out)[1..] {
        assert_eq!(&r[4..], ["0", "0", "0", "0", "0"]);
    }
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(fednoise(&["run", "--config", &cfg, "--out", a.to_str().unwrap()], Some("1")).status.success());
    assert!(fednoise(&["run", "--config", &cfg, "--out", b.to_str().unwrap()], Some("3")).status.success());
    for f in ["metrics.csv", "final_model.fsnd", "effective_config.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn effective_config_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", SMALL);
    let a = tmp.path().join("a");
    assert!(fednoise(&["run", "--config", &cfg, "--out", a.to_str().unwrap()], None).status.success());
    let echoed = a.join("effective_config.json");
    let b = tmp.path().join("b");
    let o = fednoise(&["run", "--config", echoed.to_str().unwrap(), "--out", b.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn empty_config_runs_thirty_rounds() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", "{}");
    let out = tmp.path().join("out");
    let o = fednoise(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&out).len(), 31);
}

#[test]
fn checkpoints_are_written_on_schedule() {
    let tmp = TempDir::new().unwrap();
    let json = SMALL.replacen('{', "{\n  \"checkpoint_every\": 2,", 1);
    let cfg = write_config(tmp.path(), "c.json", &json);
    let out = tmp.path().join("out");
    assert!(fednoise(&["run", "--config", &cfg, "--out", out.to_str().unwrap()], None).status.success());
    assert!(out.join("checkpoint_round_0002.fsnd").exists());
    assert!(!out.join("checkpoint_round_0001.fsnd").exists());
}

#[test]
fn unknown_key_exits_2_naming_it() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", "{\"foo\": 1}");
    let o = fednoise(&["run", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("foo"), "{}", stderr(&o));
}

#[test]
fn malformed_json_reports_line_and_column() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", "{\n  \"rounds\": 3,\n  \"lr\": oops\n}");
    let o = fednoise(&["run", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("c.json:3:"), "{}", stderr(&o));
}

#[test]
fn invalid_values_and_unknown_method_exit_2() {
    let tmp = TempDir::new().unwrap();
    for (i, json) in [r#"{"active_fraction": 1.5}"#, r#"{"method": "fedprox"}"#].iter().enumerate() {
        let cfg = write_config(tmp.path(), &format!("c{i}.json"), json);
        let o = fednoise(&["run", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()], None);
        assert_eq!(o.status.code(), Some(2), "{json}: {}", stderr(&o));
    }
}

#[test]
fn runtime_failure_exits_1() {
    let tmp = TempDir::new().unwrap();
    let json = r#"{"dataset": {"kind": "idx", "train_images": "/nonexistent/a", "train_labels": "/nonexistent/b",
                  "test_images": "/nonexistent/c", "test_labels": "/nonexistent/d"}}"#;
    let cfg = write_config(tmp.path(), "c.json", json);
    let o = fednoise(&["run", "--config", &cfg, "--out", tmp.path().join("o").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("/nonexistent/a"));
}

#[test]
fn missing_config_file_exits_2() {
    let o = fednoise(&["run", "--config", "/nonexistent.json", "--out", "/tmp/x"], None);
    assert_eq!(o.status.code(), Some(2));
}

fn counts(path: &Path) -> Vec<Vec<usize>> {
    std::fs::read_to_string(path.with_extension("counts.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn partition_near_uniform_at_large_alpha() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"dirichlet_alpha": 200}"#);
    let out = tmp.path().join("p.json");
    let o = fednoise(&["partition", "--config", &cfg, "--out", out.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = counts(&out);
    assert_eq!(table.len(), 10);
    for row in &table {
        assert!(row[..10].iter().all(|&v| v > 0));
        assert_eq!(row[..10].iter().sum::<usize>(), row[10]);
    }
    assert_eq!(table.iter().map(|r| r[10]).sum::<usize>(), 1800);
}

#[test]
fn partition_skewed_at_small_alpha() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"dirichlet_alpha": 0.5}"#);
    let out = tmp.path().join("p.json");
    assert!(fednoise(&["partition", "--config", &cfg, "--out", out.to_str().unwrap()], None).status.success());
    let mut top3: Vec<f64> = counts(&out)
        .iter()
        .map(|row| {
            let mut c = row[..10].to_vec();
            c.sort_unstable_by(|a, b| b.cmp(a));
            (c[0] + c[1] + c[2]) as f64 / row[10] as f64
        })
        .collect();
    top3.sort_by(f64::total_cmp);
    let median = (top3[4] + top3[5]) / 2.0;
    // Uniform labels would give 0.3.
    assert!(median > 0.5, "median top-3 mass {median}");
}

#[test]
fn partition_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"seed": 4}"#);
    let a = tmp.path().join("a.json");
    let b = tmp.path().join("b.json");
    assert!(fednoise(&["partition", "--config", &cfg, "--out", a.to_str().unwrap()], None).status.success());
    assert!(fednoise(&["partition", "--config", &cfg, "--out", b.to_str().unwrap()], None).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(
        std::fs::read(a.with_extension("counts.csv")).unwrap(),
        std::fs::read(b.with_extension("counts.csv")).unwrap()
    );
}

#[test]
fn infeasible_partition_exits_1() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"clients": 10, "min_per_client": 500}"#);
    let o = fednoise(&["partition", "--config", &cfg, "--out", tmp.path().join("p.json").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_covers_five_families() {
    let o = fednoise(&["gradcheck", "--seed", "7"], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = String::from_utf8_lossy(&o.stdout);
    assert!(report.lines().filter(|l| l.ends_with("ok")).count() >= 5, "{report}");
}

#[test]
fn perturbed_gradcheck_fails_with_location() {
    let o = fednoise(&["gradcheck", "--seed", "7", "--instances", "2", "--perturb", "0.01"], None);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("cross_entropy") && err.contains("coordinate 0"), "{err}");
}
