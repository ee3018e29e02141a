use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use chrono::{SecondsFormat, Utc};
use consensus_lab::runner::Experiment;
use consensus_lab::verify::{run_suite, Suite};
use consensus_lab::{build_topology, spectral_report, ExperimentConfig, LabError, TopologyKind, Trajectory};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_DIVERGED: u8 = 2;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            error: anyhow!(msg.into()),
        }
    }

    pub fn internal(error: anyhow::Error) -> Self {
        Self { code: EXIT_CONFIG, error }
    }
}

impl From<LabError> for Failure {
    fn from(e: LabError) -> Self {
        Self {
            code: EXIT_CONFIG,
            error: e.into(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::internal(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Self::internal(error)
    }
}

#[derive(Debug, Serialize)]
pub struct Seeds {
    pub objective: u64,
    pub trainer: u64,
    pub init: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub artifact_version: &'static str,
    pub seeds: Seeds,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Vec<String>,
    pub diverged: bool,
    pub divergence: Option<consensus_lab::runner::Divergence>,
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(config.canonical_text().as_bytes()))
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub struct RunResult {
    pub experiment: Experiment,
    pub trajectory: Trajectory,
}

/// Runs `config` and writes its artifacts into `out`.
pub fn execute(config: ExperimentConfig, out: &Path) -> Result<RunResult, Failure> {
    let started_at = now();
    let experiment = Experiment::new(config)?;
    let trajectory = experiment.run().map_err(|e| Failure::internal(e.into()))?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut outputs = vec!["metrics.jsonl".to_string()];
    fs::write(out.join("metrics.jsonl"), trajectory.metrics_jsonl())?;
    if let Some(slice) = &trajectory.landscape {
        fs::write(out.join("landscape.csv"), slice.to_csv())?;
        outputs.push("landscape.csv".into());
    }
    outputs.push("manifest.json".into());
    let cfg = &experiment.config;
    let manifest = RunManifest {
        config_hash: config_hash(cfg),
        artifact_version: env!("CARGO_PKG_VERSION"),
        seeds: Seeds {
            objective: cfg.objective.seed,
            trainer: cfg.trainer.seed,
            init: cfg.init.seed,
        },
        started_at,
        finished_at: now(),
        outputs,
        diverged: trajectory.diverged.is_some(),
        divergence: trajectory.diverged,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
    Ok(RunResult { experiment, trajectory })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

pub fn output_dir(config: &ExperimentConfig, over: Option<&Path>) -> PathBuf {
    over.map(Path::to_path_buf).unwrap_or_else(|| config.output.dir.clone())
}

pub fn cmd_run(path: &Path, out: Option<&Path>) -> Result<u8, Failure> {
    let config = load_config(path)?;
    let dir = output_dir(&config, out);
    let result = execute(config, &dir)?;
    let records = &result.trajectory.records;
    match result.trajectory.diverged {
        Some(d) => {
            eprintln!("diverged at step {} (worker {}); partial metrics in {}", d.step, d.worker, dir.display());
            Ok(EXIT_DIVERGED)
        }
        None => {
            let last = records.last().expect("at least one record");
            println!(
                "{} records -> {} (final loss {:.6e}, consensus distance {:.6e})",
                records.len(),
                dir.display(),
                last.train_loss,
                last.consensus_distance
            );
            Ok(EXIT_OK)
        }
    }
}

pub fn cmd_verify(suite: &str, seed: u64, out: &Path) -> Result<u8, Failure> {
    let suite: Suite = suite.parse()?;
    let report = run_suite(suite, seed);
    for c in &report.criteria {
        println!("{}", c.summary_line());
    }
    fs::create_dir_all(out)?;
    let path = out.join(format!("verify_{}.json", suite.as_str()));
    fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    println!("{} -> {}", if report.passed { "passed" } else { "FAILED" }, path.display());
    Ok(if report.passed { EXIT_OK } else { EXIT_CONFIG })
}

#[derive(Serialize)]
struct TopologyInfo {
    kind: &'static str,
    m: usize,
    /// Omitted beyond 16 workers.
    matrix: Option<Vec<Vec<f64>>>,
    eigenvalues: Vec<f64>,
    lambda: f64,
    spectral_gap: f64,
}

pub fn cmd_topology_info(kind: &str, m: usize) -> Result<u8, Failure> {
    let kind: TopologyKind = kind.parse()?;
    let p = build_topology(kind, m)?;
    let spec = spectral_report(&p)?;
    let matrix = (m <= 16).then(|| {
        (0..m)
            .map(|i| (0..m).map(|j| p.get(i, j)).collect::<Vec<f64>>())
            .collect::<Vec<_>>()
    });
    let doc = TopologyInfo {
        kind: kind.as_str(),
        m,
        matrix,
        eigenvalues: spec.eigenvalues,
        lambda: spec.lambda,
        spectral_gap: spec.spectral_gap,
    };
    println!("{}", serde_json::to_string_pretty(&doc).expect("serializes"));
    Ok(EXIT_OK)
}
