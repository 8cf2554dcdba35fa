use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedsel::cli::{AGGREGATE_HEADER, METRICS_HEADER, RELATIVE_LOSS_HEADER};
use serde_json::{json, Value};
use tempfile::TempDir;

fn fedsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedsel")).args(args).output().expect("binary runs")
}

fn write_json(dir: &Path, name: &str, v: &Value) -> String {
    let p = dir.join(name);
    fs::write(&p, v.to_string()).unwrap();
    p.to_str().unwrap().to_string()
}

fn tiny() -> Value {
    json!({
        "num_clients": 4,
        "rounds": 3,
        "clients_per_round": 2,
        "policy": {"kind": "pncs", "queue_len": 2},
        "partition": {"mode": "shard", "shards_per_client": 1},
        "model": {"arch": "linear"},
        "data": {"source": "synthetic", "classes": 4, "dim": 6, "per_class": 30, "spread": 0.5},
        "seeds": [0, 1]
    })
}

fn run_into(cfg: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", cfg, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = fedsel(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn lines(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().map(String::from).collect()
}

#[test]
fn missing_config_is_an_input_error() {
    let o = fedsel(&["run", "--config", "/nonexistent/fedsel.json", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/fedsel.json"));
}

#[test]
fn invalid_configs_are_input_errors() {
    let dir = TempDir::new().unwrap();
    let mut unknown = tiny();
    unknown["colour"] = json!("blue");
    let mut too_many = tiny();
    too_many["clients_per_round"] = json!(9);
    for (name, v) in [("unknown.json", unknown), ("too_many.json", too_many)] {
        let cfg = write_json(dir.path(), name, &v);
        let o = fedsel(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{name}");
    }
    fs::write(dir.path().join("broken.json"), "{").unwrap();
    let o = fedsel(&["run", "--config", dir.path().join("broken.json").to_str().unwrap(), "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(fedsel(&["bogus"]).status.code(), Some(2));
}

#[test]
fn divergence_has_its_own_exit_code() {
    let dir = TempDir::new().unwrap();
    let mut v = tiny();
    v["learning_rate"] = json!({"schedule": "constant", "eta": 1e308});
    let cfg = write_json(dir.path(), "c.json", &v);
    let o = fedsel(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_writes_versioned_csvs_and_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "c.json", &tiny());
    let out = dir.path().join("out");
    run_into(&cfg, &out, &[]);
    let metrics = lines(&out.join("metrics.csv"));
    assert_eq!(metrics[0], "# fedsel-csv v1");
    assert_eq!(metrics[1], METRICS_HEADER.join(","));
    assert_eq!(metrics.len(), 2 + 2 * 3);
    let aggregate = lines(&out.join("aggregate.csv"));
    assert_eq!(aggregate[0], "# fedsel-csv v1");
    assert_eq!(aggregate[1], AGGREGATE_HEADER.join(","));
    assert_eq!(aggregate.len(), 2 + 3);
    assert!(aggregate[2].starts_with("pncs,"));
    assert_eq!(lines(&out.join("rounds.jsonl")).len(), 6);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "run");
    assert_eq!(manifest["seeds"], json!([0, 1]));
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "c.json", &tiny());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_into(&cfg, &a, &[]);
    run_into(&cfg, &b, &["--jobs", "1"]);
    for f in ["metrics.csv", "aggregate.csv", "rounds.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_offset_shifts_every_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "c.json", &tiny());
    let out = dir.path().join("o");
    run_into(&cfg, &out, &["--seed-offset", "10"]);
    let seeds: Vec<String> = lines(&out.join("metrics.csv"))[2..].iter().map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(seeds, ["10", "10", "10", "11", "11", "11"]);
}

fn sweep(dir: &Path, seeds: Value, policies: Value) -> PathBuf {
    let mut base = tiny();
    base["seeds"] = json!([0]);
    let cfg = write_json(dir, "sweep.json", &json!({"base": base, "axes": {"seeds": seeds, "policies": policies}}));
    let out = dir.join("sweep");
    let o = fedsel(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn sweep_expands_the_grid() {
    let dir = TempDir::new().unwrap();
    let out = sweep(dir.path(), json!([0, 1]), json!([{"kind": "pncs"}, {"kind": "random"}]));
    let runs: Vec<PathBuf> = fs::read_dir(out.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 4);
    for r in &runs {
        assert!(r.join("manifest.json").is_file());
    }
    let (header, rows) = fedsel::cli::read_csv(&out.join("aggregate.csv")).unwrap();
    // two cells, three rounds each, each over two seeds
    assert_eq!(rows.len(), 6);
    let seeds = header.iter().position(|h| h == "seeds").unwrap();
    assert!(rows.iter().all(|r| r[seeds] == "2"));
    assert_eq!(rows.iter().filter(|r| r[0] == "random").count(), 3);
    assert!(out.join("manifest.json").is_file());
}

#[test]
fn single_point_sweep_equals_run() {
    let dir = TempDir::new().unwrap();
    let out = sweep(dir.path(), json!([0]), json!([{"kind": "pncs", "queue_len": 2}]));
    let run_dir = fs::read_dir(out.join("runs")).unwrap().next().unwrap().unwrap().path();
    let mut v = tiny();
    v["seeds"] = json!([0]);
    let cfg = write_json(dir.path(), "single.json", &v);
    let direct = dir.path().join("direct");
    run_into(&cfg, &direct, &[]);
    for f in ["metrics.csv", "aggregate.csv", "rounds.jsonl"] {
        assert_eq!(fs::read(run_dir.join(f)).unwrap(), fs::read(direct.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn report_reads_runs_and_merges_them() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "c.json", &tiny());
    let mut other = tiny();
    other["policy"] = json!({"kind": "random"});
    let cfg2 = write_json(dir.path(), "r.json", &other);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_into(&cfg, &a, &[]);
    run_into(&cfg2, &b, &[]);
    let out = dir.path().join("report");
    let o = fedsel(&["report", a.to_str().unwrap(), b.join("aggregate.csv").to_str().unwrap(), "--out", out.to_str().unwrap(), "--target", "0.0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let acc = lines(&out.join("accuracy_at_round.csv"));
    assert_eq!(acc.len(), 2 + 2);
    // the last aggregate row's accuracy passes through unchanged
    let last = lines(&a.join("aggregate.csv")).pop().unwrap();
    let mean = last.rsplit(',').nth(3).unwrap().to_string();
    assert!(acc[2].starts_with("pncs,") && acc[2].contains(&format!(",3,{mean},")));
    assert!(acc[3].starts_with("random,"));
    let tgt = lines(&out.join("rounds_to_target.csv"));
    assert!(tgt[2..].iter().all(|l| l.ends_with(",0,1")));
}

#[test]
fn report_rejects_unversioned_csv() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("plain.csv");
    fs::write(&p, AGGREGATE_HEADER.join(",") + "\n").unwrap();
    assert_eq!(fedsel(&["report", p.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn study_writes_report_and_tables() {
    let dir = TempDir::new().unwrap();
    let cfg = write_json(dir.path(), "s.json", &json!({
        "num_clients": 4,
        "rounds": 2,
        "model": {"arch": "linear"},
        "data": {"source": "synthetic", "classes": 4, "dim": 5, "per_class": 30, "spread": 0.5},
        "heterogeneity": [{"mode": "shard", "shards_per_client": 1}],
        "seeds": [0, 1]
    }));
    let out = dir.path().join("study");
    let o = fedsel(&["study", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_str(&fs::read_to_string(out.join("study_report.json")).unwrap()).unwrap();
    assert_eq!(report["samples"], 2 * 2 * 6);
    assert_eq!(report["ranking"].as_array().unwrap().len(), 10);
    assert_eq!(lines(&out.join("relative_loss.csv"))[1], RELATIVE_LOSS_HEADER.join(","));
    assert_eq!(lines(&out.join("pairs.csv")).len(), 2 + 24);
}

#[test]
fn example_configs_parse() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["tiny.json", "heterogeneous.json"] {
        let cfg = fedsel::config::ExperimentConfig::from_file(&root.join(name)).unwrap();
        let back = fedsel::config::ExperimentConfig::from_json(&cfg.canonical_json()).unwrap();
        assert_eq!(cfg, back);
    }
    fedsel::study::StudyConfig::from_file(&root.join("study.json")).unwrap();
    fedsel::cli::SweepConfig::from_file(&root.join("sweep.json")).unwrap().expand(0).unwrap();
}
