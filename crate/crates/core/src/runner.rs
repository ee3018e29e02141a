//! Deterministic experiment loop producing a trajectory of diagnostics
//! records.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::diagnostics::{
    avg_direction_sharpness, consensus_distance, hessian_consensus_alignment, implicit_regularizer_dsgd,
    implicit_regularizer_sgd, landscape_slice, weight_diversity_matrix, LandscapeSlice, RegularizerReport,
};
use crate::engine::{
    adsam_step_factored, csgd_step, dsgd_step, sgd_step, vanilla_sam_step, Algorithm, StepOutcome, WorkerEnsemble,
};
use crate::error::{LabError, Result};
use crate::linalg::PsdFactor;
use crate::objectives::{batch_gradient, batch_loss, Dataset, Objective};
use crate::rng::{self, Purpose};
use crate::topology::GossipMatrix;

/// One snapshot's measurements. Serialized keys keep declaration order and
/// absent measurements serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub step: usize,
    pub eta: f64,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub consensus_distance: f64,
    pub weight_diversity: Option<Vec<Vec<f64>>>,
    pub sharpness: Option<f64>,
    pub sharpness_stderr: Option<f64>,
    pub hessian_alignment: Option<f64>,
    pub regularizer: Option<RegularizerReport>,
    /// Seconds since the run started. Not serialized, so metric files stay
    /// byte-reproducible.
    #[serde(skip)]
    pub wall_clock: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub worker: usize,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub records: Vec<DiagnosticsRecord>,
    pub diverged: Option<Divergence>,
    /// Last finite ensemble.
    pub final_ensemble: WorkerEnsemble,
    pub landscape: Option<LandscapeSlice>,
}

impl Trajectory {
    /// One JSON object per line.
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }
}

/// Everything a run needs, built once from a config.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub objective: Box<dyn Objective>,
    pub dataset: Dataset,
    pub topology: Option<GossipMatrix>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        let (objective, dataset) = config.build_objective()?;
        let topology = config.build_topology()?;
        Ok(Self {
            config,
            objective,
            dataset,
            topology,
        })
    }

    pub fn initial_ensemble(&self) -> WorkerEnsemble {
        let w0 = self.objective.initial_point(self.config.init.seed);
        WorkerEnsemble::with_offsets(&w0, self.config.workers(), self.config.init.scale, self.config.init.seed)
    }

    fn record(&self, e: &WorkerEnsemble, step: usize, started: &Instant) -> Result<DiagnosticsRecord> {
        let obj = self.objective.as_ref();
        let spec = &self.config.diagnostics;
        let trainer = &self.config.trainer;
        let all = self.dataset.all_indices();
        let w = e.averaged_model();
        let d = obj.dim();
        let xi = if spec.weight_diversity || spec.sharpness_draws > 0 || spec.alignment || spec.regularizer {
            Some(weight_diversity_matrix(e)?)
        } else {
            None
        };
        let sharp = match (&xi, spec.sharpness_draws) {
            (Some(xi), k) if k > 0 => {
                let seed = rng::stream(trainer.seed, Purpose::Sharpness, 0, step).next_u64();
                Some(avg_direction_sharpness(obj, &w, xi, k, all, seed)?)
            }
            _ => None,
        };
        let alignment = match (&xi, spec.alignment) {
            (Some(xi), true) => Some(hessian_consensus_alignment(obj, &w, xi, all)?),
            _ => None,
        };
        let regularizer = match (&xi, spec.regularizer) {
            (Some(xi), true) => {
                let b = trainer.total_batch(e.m(), &self.dataset);
                let eta = trainer.eta_at(step);
                Some(if e.m() == 1 {
                    implicit_regularizer_sgd(obj, &w, eta, b)?
                } else {
                    implicit_regularizer_dsgd(obj, &w, xi, eta, b)?
                })
            }
            _ => None,
        };
        let weight_diversity = match (&xi, spec.weight_diversity) {
            (Some(xi), true) => Some((0..d).map(|i| xi.row(i).iter().copied().collect()).collect()),
            _ => None,
        };
        Ok(DiagnosticsRecord {
            step,
            eta: trainer.eta_at(step),
            train_loss: batch_loss(obj, &w, all)?,
            grad_norm: batch_gradient(obj, &w, all)?.norm(),
            consensus_distance: consensus_distance(e),
            weight_diversity,
            sharpness: sharp.map(|s| s.mean),
            sharpness_stderr: sharp.map(|s| s.stderr),
            hessian_alignment: alignment,
            regularizer,
            wall_clock: started.elapsed().as_secs_f64(),
        })
    }

    /// One round of the configured algorithm.
    pub fn step(&self, e: &WorkerEnsemble, step: usize, adsam: Option<&PsdFactor>) -> Result<StepOutcome> {
        let obj = self.objective.as_ref();
        let cfg = &self.config.trainer;
        let ds = &self.dataset;
        match cfg.algorithm {
            Algorithm::Dsgd => {
                let p = self.topology.as_ref().expect("validated: dsgd has a topology");
                dsgd_step(e, p, obj, ds, cfg, step)
            }
            Algorithm::Csgd => csgd_step(e, obj, ds, cfg, step),
            Algorithm::Sgd => sgd_step(&e.worker(0), obj, ds, cfg, step),
            Algorithm::Sam => vanilla_sam_step(&e.worker(0), obj, ds, cfg, step),
            Algorithm::Adsam => adsam_step_factored(&e.worker(0), obj, ds, adsam.expect("adsam factor"), cfg, step),
        }
    }

    /// Runs all steps, recording at step 0, every `diagnostics.every` steps,
    /// and at the end. Records describe pre-step snapshots.
    pub fn run(&self) -> Result<Trajectory> {
        let started = Instant::now();
        let cfg = &self.config.trainer;
        let every = self.config.diagnostics.every;
        let adsam = (cfg.algorithm == Algorithm::Adsam)
            .then(|| {
                let d = self.objective.dim();
                PsdFactor::new(&(DMatrix::identity(d, d) * cfg.adsam_sigma2))
            })
            .transpose()?;
        let mut e = self.initial_ensemble();
        let mut records = Vec::new();
        let mut diverged = None;
        for t in 0..cfg.steps {
            if t % every == 0 {
                records.push(self.record(&e, t, &started)?);
            }
            match self.step(&e, t, adsam.as_ref()) {
                Ok(out) => e = out.post,
                Err(LabError::Diverged { step, worker }) => {
                    diverged = Some(Divergence { step, worker });
                    break;
                }
                Err(other) => return Err(other),
            }
        }
        if diverged.is_none() && records.last().is_none_or(|r| r.step != cfg.steps) {
            records.push(self.record(&e, cfg.steps, &started)?);
        }
        let landscape = match (&self.config.diagnostics.landscape, diverged) {
            (Some(l), None) => Some(landscape_slice(
                self.objective.as_ref(),
                &e.averaged_model(),
                self.dataset.all_indices(),
                l.mode,
                l.extent,
                l.resolution,
                cfg.seed,
            )?),
            _ => None,
        };
        Ok(Trajectory {
            records,
            diverged,
            final_ensemble: e,
            landscape,
        })
    }
}

/// Builds and runs an experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Trajectory> {
    Experiment::new(config.clone())?.run()
}

/// Runs `steps` D-SGD rounds from `start` and returns every snapshot
/// `W(0), ..., W(steps)`.
pub fn dsgd_history<O: Objective + ?Sized>(
    obj: &O,
    dataset: &Dataset,
    p: &GossipMatrix,
    config: &crate::engine::TrainerConfig,
    start: WorkerEnsemble,
) -> Result<Vec<WorkerEnsemble>> {
    let mut hist = vec![start];
    for t in 0..config.steps {
        let next = dsgd_step(hist.last().expect("nonempty"), p, obj, dataset, config, t)?.post;
        hist.push(next);
    }
    Ok(hist)
}

/// Mean consensus distance over the records from `from_step` on.
pub fn mean_consensus_distance(records: &[DiagnosticsRecord], from_step: usize) -> Option<f64> {
    let tail: Vec<f64> = records.iter().filter(|r| r.step >= from_step).map(|r| r.consensus_distance).collect();
    (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
}
