use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_consensus-lab"))
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"
[objective]
family = "cubic_perturbed"
d = 3
n = 24
seed = 2

[topology]
kind = "ring"
m = 6

[trainer]
eta = 0.02
steps = 30
local_batch = 2
seed = 4

[init]
scale = 0.2

[diagnostics]
every = 10
"#;

fn run(config: &Path, out: &Path) -> Output {
    bin().arg("run").arg(config).arg("--out").arg(out).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zero_steps_writes_one_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("steps = 30", "steps = 0"));
    let out = run(&cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let metrics = fs::read_to_string(dir.path().join("out/metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["diverged"], false);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn metrics_lines_share_keys_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert_eq!(run(&cfg, &dir.path().join("a")).status.code(), Some(0));
    assert_eq!(run(&cfg, &dir.path().join("b")).status.code(), Some(0));
    let a = fs::read(dir.path().join("a/metrics.jsonl")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/metrics.jsonl")).unwrap());
    let keys: Vec<Vec<String>> = String::from_utf8(a)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Map<String, Value>>(l).unwrap().keys().cloned().collect())
        .collect();
    assert_eq!(keys.len(), 4);
    assert!(keys.windows(2).all(|w| w[0] == w[1]));
    let ma: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a/manifest.json")).unwrap()).unwrap();
    let mb: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("b/manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["config_hash"], mb["config_hash"]);
}

#[test]
fn config_errors_exit_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("eta = 0.02", "eta = -0.5"));
    let out = run(&cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("trainer.eta"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), &SMALL.replace("local_batch = 2", "local_bach = 2"));
    let out = run(&cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("local_bach"), "{}", stderr(&out));

    let cfg = write_config(dir.path(), &SMALL.replace("kind = \"ring\"\nm = 6", "kind = \"grid\"\nm = 6"));
    assert_eq!(run(&cfg, &dir.path().join("out")).status.code(), Some(1));

    let missing = SMALL.replace("kind = \"ring\"", "kind = \"custom\"\nfile = \"nowhere.txt\"");
    let cfg = write_config(dir.path(), &missing);
    let out = run(&cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("topology.file"), "{}", stderr(&out));
}

#[test]
fn custom_topology_file_is_resolved_next_to_config() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("path.txt"), "# a path graph\n6\n0 1\n1 2\n2 3\n3 4\n4 5\n").unwrap();
    let body = SMALL.replace("kind = \"ring\"", "kind = \"custom\"\nfile = \"path.txt\"");
    let cfg = write_config(dir.path(), &body);
    let out = run(&cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn divergence_exits_two_with_partial_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("eta = 0.02", "eta = 1e6"));
    let out = run(&cfg, &dir.path().join("out"));
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["diverged"], true);
    assert!(!fs::read_to_string(dir.path().join("out/metrics.jsonl")).unwrap().is_empty());
}

#[test]
fn landscape_csv_is_written_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}landscape = {{ mode = \"2d\", extent = 0.5, resolution = 5 }}\n");
    let cfg = write_config(dir.path(), &body);
    assert_eq!(run(&cfg, &dir.path().join("out")).status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("out/landscape.csv")).unwrap();
    assert!(csv.starts_with("x,y,loss\n"));
    assert_eq!(csv.lines().count(), 26);
}

fn topology_info(kind: &str, m: &str) -> Output {
    bin().args(["topology-info", kind, m]).output().unwrap()
}

#[test]
fn topology_info_reports_gaps() {
    let out = topology_info("ring", "4");
    assert_eq!(out.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(format!("{:.6}", v["spectral_gap"].as_f64().unwrap()), "0.666667");
    assert_eq!(v["matrix"].as_array().unwrap().len(), 4);

    let v: Value = serde_json::from_slice(&topology_info("fully_connected", "4").stdout).unwrap();
    assert_eq!(v["spectral_gap"].as_f64(), Some(1.0));

    let v: Value = serde_json::from_slice(&topology_info("ring", "20").stdout).unwrap();
    assert!(v["matrix"].is_null());
    assert_eq!(v["eigenvalues"].as_array().unwrap().len(), 20);

    let out = topology_info("grid", "5");
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("perfect-square"));
    assert_eq!(topology_info("hypercube", "4").status.code(), Some(1));
}

#[test]
fn verify_props_passes_and_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["verify", "props", "--seed", "2", "--out"]).arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify_props.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    let names: Vec<&str> = report["criteria"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    assert!(names.contains(&"quadratic_zero_gradient_diversity") && names.contains(&"spectral_gaps"));

    let out = bin().args(["verify", "nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_lemma_and_theorem_suites_pass() {
    let dir = tempfile::tempdir().unwrap();
    for suite in ["lemma_c2", "theorem1"] {
        let out = bin().args(["verify", suite, "--out"]).arg(dir.path()).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
        assert!(dir.path().join(format!("verify_{suite}.json")).is_file());
    }
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify_theorem1.json")).unwrap()).unwrap();
    let slope = report["criteria"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == "residual_cubic_order")
        .unwrap()["details"]["slope"]
        .as_f64()
        .unwrap();
    assert!((2.5..=3.5).contains(&slope));
}

fn sweep(config: &Path, axis: &str, out: &Path) -> Output {
    bin().arg("sweep").arg(config).args(["--axis", axis, "--out"]).arg(out).output().unwrap()
}

fn summary(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

#[test]
fn single_value_sweep_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert_eq!(run(&cfg, &dir.path().join("single")).status.code(), Some(0));
    let out = sweep(&cfg, "trainer.eta=0.02", &dir.path().join("sweep"));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(
        fs::read(dir.path().join("single/metrics.jsonl")).unwrap(),
        fs::read(dir.path().join("sweep/trainer.eta=0.02/metrics.jsonl")).unwrap()
    );
    assert_eq!(summary(&dir.path().join("sweep/sweep_summary.csv")).len(), 1);
}

#[test]
fn sweep_kappa_decreases_with_batch() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace("n = 24", "n = 256").replace("eta = 0.02", "eta = 0.02\nalgorithm = \"sgd\"");
    let cfg = write_config(dir.path(), &body);
    let out = sweep(&cfg, "local_batch=4,16,64", &dir.path().join("sweep"));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rows = summary(&dir.path().join("sweep/sweep_summary.csv"));
    let kappa: Vec<f64> = rows.iter().map(|r| r[8].parse().unwrap()).collect();
    assert!(kappa.windows(2).all(|w| w[1] < w[0]), "{kappa:?}");
}

#[test]
fn sweep_ring_keeps_more_diversity() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace("m = 6", "m = 16").replace("steps = 30", "steps = 200");
    let cfg = write_config(dir.path(), &body);
    let out = sweep(&cfg, "topology.kind=ring,fully_connected", &dir.path().join("sweep"));
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let rows = summary(&dir.path().join("sweep/sweep_summary.csv"));
    let mean: Vec<f64> = rows.iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(mean[0] > mean[1], "{mean:?}");
}

#[test]
fn sweep_rejects_bad_points_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = sweep(&cfg, "eta=0.01,-1", &dir.path().join("sweep"));
    assert_eq!(out.status.code(), Some(1));
    assert!(!dir.path().join("sweep").exists());
    assert_eq!(sweep(&cfg, "no_such_key=1", &dir.path().join("s2")).status.code(), Some(1));
    assert_eq!(sweep(&cfg, "eta", &dir.path().join("s3")).status.code(), Some(1));
}

#[test]
fn thread_cap_is_validated() {
    let out = bin().env("CONSENSUS_LAB_THREADS", "zero").args(["topology-info", "ring", "4"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let capped = bin().env("CONSENSUS_LAB_THREADS", "1").arg("run").arg(&cfg).arg("--out").arg(dir.path().join("one")).output().unwrap();
    assert_eq!(capped.status.code(), Some(0));
    assert_eq!(run(&cfg, &dir.path().join("many")).status.code(), Some(0));
    assert_eq!(
        fs::read(dir.path().join("one/metrics.jsonl")).unwrap(),
        fs::read(dir.path().join("many/metrics.jsonl")).unwrap()
    );
}
