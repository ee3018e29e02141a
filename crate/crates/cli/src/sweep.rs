use std::path::Path;

use consensus_lab::config::{parse_axis_value, set_config_key};
use consensus_lab::diagnostics::{hessian_max_eigenvalue, kappa};
use consensus_lab::runner::mean_consensus_distance;
use consensus_lab::ExperimentConfig;
use rayon::prelude::*;
use serde::Serialize;

use crate::run::{execute, output_dir, Failure, RunResult, EXIT_DIVERGED, EXIT_OK};

#[derive(Debug, Serialize)]
struct SummaryRow {
    run: String,
    key: String,
    value: String,
    final_loss: f64,
    final_consensus_distance: f64,
    /// Mean over records in the second half of the run.
    mean_consensus_distance: f64,
    lambda_max: f64,
    sharpness: Option<f64>,
    kappa: f64,
    diverged: bool,
}

fn parse_axis(axis: &str) -> Result<(String, Vec<String>), Failure> {
    let (key, values) = axis
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("axis must look like key=v1,v2,..., got `{axis}`")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
    if key.trim().is_empty() || values.is_empty() {
        return Err(Failure::config(format!("axis `{axis}` needs a key and at least one value")));
    }
    Ok((key.trim().to_string(), values))
}

fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-=".contains(c) { c } else { '_' })
        .collect()
}

fn summarize(name: String, key: &str, value: &str, r: &RunResult) -> Result<SummaryRow, Failure> {
    let cfg = &r.experiment.config;
    let records = &r.trajectory.records;
    let last = records.last().expect("at least one record");
    let e = &r.trajectory.final_ensemble;
    let ds = &r.experiment.dataset;
    let lambda_max = if r.trajectory.diverged.is_some() {
        f64::NAN
    } else {
        hessian_max_eigenvalue(r.experiment.objective.as_ref(), &e.averaged_model(), ds.all_indices())?
    };
    let b = cfg.trainer.total_batch(cfg.workers(), ds);
    Ok(SummaryRow {
        run: name,
        key: key.to_string(),
        value: value.to_string(),
        final_loss: last.train_loss,
        final_consensus_distance: last.consensus_distance,
        mean_consensus_distance: mean_consensus_distance(records, cfg.trainer.steps / 2).unwrap_or(f64::NAN),
        lambda_max,
        sharpness: last.sharpness,
        kappa: kappa(cfg.trainer.eta, b, ds.len()),
        diverged: r.trajectory.diverged.is_some(),
    })
}

pub fn cmd_sweep(path: &Path, axis: &str, out: Option<&Path>) -> Result<u8, Failure> {
    let base_text = std::fs::read_to_string(path).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let base: toml::Table =
        toml::from_str(&base_text).map_err(|e| Failure::config(format!("{}: {e}", path.display())))?;
    let (key, values) = parse_axis(axis)?;
    let base_dir = path.parent().unwrap_or(Path::new("."));

    // Every point must parse before anything runs.
    let mut points = Vec::with_capacity(values.len());
    let mut root = None;
    for v in &values {
        let mut doc = base.clone();
        let full_key = set_config_key(&mut doc, &key, parse_axis_value(v))?;
        let mut cfg = ExperimentConfig::from_table(doc).map_err(|e| Failure::config(format!("{full_key}={v}: {e}")))?;
        cfg.resolve_paths(base_dir);
        cfg.check_files()?;
        root.get_or_insert_with(|| output_dir(&cfg, out));
        points.push((full_key, v.clone(), cfg));
    }
    let root = root.expect("at least one value");

    let results: Vec<Result<SummaryRow, Failure>> = points
        .into_par_iter()
        .map(|(full_key, v, cfg)| {
            let name = sanitize(&format!("{full_key}={v}"));
            let r = execute(cfg, &root.join(&name))?;
            summarize(name, &full_key, &v, &r)
        })
        .collect();
    let rows = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    std::fs::create_dir_all(&root).map_err(|e| Failure::internal(e.into()))?;
    let summary = root.join("sweep_summary.csv");
    let mut w = csv::Writer::from_path(&summary).map_err(|e| Failure::internal(e.into()))?;
    for row in &rows {
        w.serialize(row).map_err(|e| Failure::internal(e.into()))?;
        println!(
            "{}: final loss {:.6e}, mean consensus distance {:.6e}{}",
            row.run,
            row.final_loss,
            row.mean_consensus_distance,
            if row.diverged { " (diverged)" } else { "" }
        );
    }
    w.flush().map_err(|e| Failure::internal(e.into()))?;
    println!("summary -> {}", summary.display());
    Ok(if rows.iter().any(|r| r.diverged) { EXIT_DIVERGED } else { EXIT_OK })
}
