//! Optimizer state machines: D-SGD, distributed C-SGD, single-worker SGD,
//! vanilla SAM, and Monte-Carlo average-direction SAM.
//!
//! All steps are synchronous rounds. Worker gradients may be computed in
//! parallel, but every cross-worker or cross-sample sum runs in index order,
//! so results are bit-identical regardless of thread count.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::seq::SliceRandom;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::PsdFactor;
use crate::montecarlo::{gaussian_expectation, DrawScheme};
use crate::objectives::{batch_gradient, Batch, Dataset, Objective};
use crate::rng::{self, Purpose};
use crate::topology::{gossip_mix, GossipMatrix};

/// The `m` local models, one row per worker.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerEnsemble {
    weights: DMatrix<f64>,
}

impl WorkerEnsemble {
    pub fn from_rows(weights: DMatrix<f64>) -> Self {
        Self { weights }
    }

    pub fn from_vectors(rows: &[DVector<f64>]) -> Self {
        let d = rows.first().map_or(0, |r| r.len());
        Self {
            weights: DMatrix::from_fn(rows.len(), d, |j, i| rows[j][i]),
        }
    }

    /// `m` identical copies of `w`.
    pub fn replicated(w: &DVector<f64>, m: usize) -> Self {
        Self {
            weights: DMatrix::from_fn(m, w.len(), |_, i| w[i]),
        }
    }

    /// Common initialization plus an independent `N(0, scale²)` offset per
    /// worker and coordinate.
    pub fn with_offsets(w: &DVector<f64>, m: usize, scale: f64, seed: u64) -> Self {
        let mut weights = DMatrix::from_fn(m, w.len(), |_, i| w[i]);
        if scale > 0.0 {
            for j in 0..m {
                let mut r = rng::stream(seed, Purpose::Init, j, 0);
                for i in 0..w.len() {
                    weights[(j, i)] += scale * r.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Self { weights }
    }

    pub fn m(&self) -> usize {
        self.weights.nrows()
    }

    pub fn d(&self) -> usize {
        self.weights.ncols()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn worker(&self, j: usize) -> DVector<f64> {
        self.weights.row(j).transpose()
    }

    /// `w_a = (1/m) Σ_j w_j`, summed in worker order.
    pub fn averaged_model(&self) -> DVector<f64> {
        let m = self.m() as f64;
        DVector::from_fn(self.d(), |i, _| {
            let mut s = 0.0;
            for j in 0..self.m() {
                s += self.weights[(j, i)];
            }
            s / m
        })
    }

    /// Moves every worker to `w_a + c (w_j − w_a)`.
    pub fn scaled_about_mean(&self, c: f64) -> Self {
        let wa = self.averaged_model();
        Self {
            weights: DMatrix::from_fn(self.m(), self.d(), |j, i| wa[i] + c * (self.weights[(j, i)] - wa[i])),
        }
    }

    /// Index of the first worker holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<usize> {
        (0..self.m()).find(|&j| self.weights.row(j).iter().any(|v| !v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Dsgd,
    Csgd,
    Sgd,
    Sam,
    Adsam,
}

impl Algorithm {
    /// Algorithms that keep one model rather than a worker ensemble.
    pub fn is_single_model(self) -> bool {
        matches!(self, Algorithm::Sgd | Algorithm::Sam | Algorithm::Adsam)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    /// `local_batch` indices drawn uniformly with replacement from the
    /// worker's shard.
    #[default]
    Iid,
    /// A seeded permutation per epoch, cut into consecutive global batches
    /// of `m · local_batch`; worker `j` takes the `j`-th slice.
    EpochPartition,
    /// Every worker uses its whole shard.
    FullBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Multiply the rate by `factor` every `every` steps.
    StepDecay { every: usize, factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub algorithm: Algorithm,
    pub eta: f64,
    pub schedule: LrSchedule,
    pub local_batch: usize,
    pub steps: usize,
    pub sampling: SamplingMode,
    pub sam_rho: f64,
    pub adsam_samples: usize,
    /// Isotropic variance used by `adsam` inside full runs.
    pub adsam_sigma2: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Dsgd,
            eta: 0.1,
            schedule: LrSchedule::Constant,
            local_batch: 1,
            steps: 100,
            sampling: SamplingMode::Iid,
            sam_rho: 0.05,
            adsam_samples: 16,
            adsam_sigma2: 0.01,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::InvalidArgument(msg));
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be a nonnegative finite number, got {}", self.eta));
        }
        if self.local_batch == 0 {
            return bad("local_batch must be at least 1".into());
        }
        if !(self.sam_rho >= 0.0) {
            return bad(format!("sam_rho must be nonnegative, got {}", self.sam_rho));
        }
        if self.adsam_samples == 0 {
            return bad("adsam_samples must be at least 1".into());
        }
        if !(self.adsam_sigma2 >= 0.0) {
            return bad(format!("adsam_sigma2 must be nonnegative, got {}", self.adsam_sigma2));
        }
        if let LrSchedule::StepDecay { every, factor } = self.schedule {
            if every == 0 || !(factor > 0.0) {
                return bad("step decay needs every >= 1 and factor > 0".into());
            }
        }
        Ok(())
    }

    pub fn eta_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.eta,
            LrSchedule::StepDecay { every, factor } => self.eta * factor.powi((step / every) as i32),
        }
    }

    /// Total batch size `B` across `m` workers.
    pub fn total_batch(&self, m: usize, dataset: &Dataset) -> usize {
        match self.sampling {
            SamplingMode::FullBatch => dataset.len(),
            _ => (m * self.local_batch).min(dataset.len()),
        }
    }
}

/// Draws one batch per worker for `step`. Each worker's draw depends only
/// on `(seed, worker, step)`.
pub fn draw_batches(dataset: &Dataset, m: usize, config: &TrainerConfig, step: usize) -> Result<Vec<Batch>> {
    match config.sampling {
        SamplingMode::FullBatch => Ok((0..m).map(|j| Batch::new(j, dataset.shard(j).to_vec())).collect()),
        SamplingMode::Iid => (0..m)
            .map(|j| {
                let shard = dataset.shard(j);
                if shard.is_empty() {
                    return Err(LabError::EmptyBatch);
                }
                let mut r = rng::stream(config.seed, Purpose::Batch, j, step);
                let idx = (0..config.local_batch)
                    .map(|_| shard[r.random_range(0..shard.len())])
                    .collect();
                Ok(Batch::new(j, idx))
            })
            .collect(),
        SamplingMode::EpochPartition => {
            let global = m * config.local_batch;
            if global > dataset.len() {
                return Err(LabError::InvalidArgument(format!(
                    "total batch {global} exceeds dataset size {}",
                    dataset.len()
                )));
            }
            let per_epoch = dataset.len() / global;
            let epoch = step / per_epoch;
            let slot = step % per_epoch;
            let mut perm = dataset.all_indices().to_vec();
            perm.shuffle(&mut rng::stream(config.seed, Purpose::Epoch, 0, epoch));
            Ok((0..m)
                .map(|j| {
                    let start = slot * global + j * config.local_batch;
                    Batch::new(j, perm[start..start + config.local_batch].to_vec())
                })
                .collect())
        }
    }
}

/// Result of one synchronous round.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    /// Snapshot of the ensemble before the round.
    pub pre: WorkerEnsemble,
    pub post: WorkerEnsemble,
    pub batches: Vec<Batch>,
    /// The stochastic gradient each worker applied.
    pub gradients: Vec<DVector<f64>>,
}

fn worker_gradients<O: Objective + ?Sized>(
    obj: &O,
    points: &[DVector<f64>],
    batches: &[Batch],
    step: usize,
) -> Result<Vec<DVector<f64>>> {
    let grads: Vec<Result<DVector<f64>>> = points
        .par_iter()
        .zip(batches.par_iter())
        .map(|(w, b)| batch_gradient(obj, w, &b.indices))
        .collect();
    let grads = grads.into_iter().collect::<Result<Vec<_>>>()?;
    if let Some(worker) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(LabError::Diverged { step, worker });
    }
    Ok(grads)
}

fn check_finite(ensemble: &WorkerEnsemble, step: usize) -> Result<()> {
    match ensemble.first_non_finite() {
        Some(worker) => Err(LabError::Diverged { step, worker }),
        None => Ok(()),
    }
}

/// One D-SGD round (adapt-while-communicate):
/// `w_j ← Σ_k P_jk w_k − η ∇L^{μ_j}(w_j)`, gradients taken at the pre-mix
/// iterates.
pub fn dsgd_step<O: Objective + ?Sized>(
    ensemble: &WorkerEnsemble,
    p: &GossipMatrix,
    obj: &O,
    dataset: &Dataset,
    config: &TrainerConfig,
    step: usize,
) -> Result<StepOutcome> {
    let m = ensemble.m();
    if p.m() != m {
        return Err(LabError::DimensionMismatch {
            expected: m,
            actual: p.m(),
            context: "gossip matrix size vs worker count",
        });
    }
    let batches = draw_batches(dataset, m, config, step)?;
    let points: Vec<DVector<f64>> = (0..m).map(|j| ensemble.worker(j)).collect();
    let gradients = worker_gradients(obj, &points, &batches, step)?;
    let mut next = gossip_mix(p, ensemble.weights())?;
    let eta = config.eta_at(step);
    for (j, g) in gradients.iter().enumerate() {
        for i in 0..ensemble.d() {
            next[(j, i)] -= eta * g[i];
        }
    }
    let post = WorkerEnsemble::from_rows(next);
    check_finite(&post, step)?;
    Ok(StepOutcome {
        pre: ensemble.clone(),
        post,
        batches,
        gradients,
    })
}

/// One distributed C-SGD round: the single logical model (the ensemble
/// mean) moves by the mean of the workers' local batch gradients. Batch
/// draws match [`dsgd_step`] for the same seed and step.
pub fn csgd_step<O: Objective + ?Sized>(
    ensemble: &WorkerEnsemble,
    obj: &O,
    dataset: &Dataset,
    config: &TrainerConfig,
    step: usize,
) -> Result<StepOutcome> {
    let m = ensemble.m();
    let w = ensemble.averaged_model();
    let batches = draw_batches(dataset, m, config, step)?;
    let points = vec![w.clone(); m];
    let gradients = worker_gradients(obj, &points, &batches, step)?;
    let mut mean = DVector::zeros(w.len());
    for g in &gradients {
        mean += g;
    }
    mean /= m as f64;
    let next = &w - mean * config.eta_at(step);
    let post = WorkerEnsemble::replicated(&next, m);
    check_finite(&post, step)?;
    Ok(StepOutcome {
        pre: ensemble.clone(),
        post,
        batches,
        gradients,
    })
}

fn single_batch(dataset: &Dataset, config: &TrainerConfig, step: usize) -> Result<Batch> {
    Ok(draw_batches(dataset, 1, config, step)?.remove(0))
}

fn single_outcome(pre: &DVector<f64>, post: DVector<f64>, batch: Batch, gradient: DVector<f64>, step: usize) -> Result<StepOutcome> {
    if post.iter().any(|v| !v.is_finite()) {
        return Err(LabError::Diverged { step, worker: 0 });
    }
    Ok(StepOutcome {
        pre: WorkerEnsemble::replicated(pre, 1),
        post: WorkerEnsemble::replicated(&post, 1),
        batches: vec![batch],
        gradients: vec![gradient],
    })
}

fn finite_gradient(g: DVector<f64>, step: usize) -> Result<DVector<f64>> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(LabError::Diverged { step, worker: 0 });
    }
    Ok(g)
}

/// Plain mini-batch SGD on one model, drawing from worker 0's stream.
pub fn sgd_step<O: Objective + ?Sized>(
    w: &DVector<f64>,
    obj: &O,
    dataset: &Dataset,
    config: &TrainerConfig,
    step: usize,
) -> Result<StepOutcome> {
    let batch = single_batch(dataset, config, step)?;
    let g = finite_gradient(batch_gradient(obj, w, &batch.indices)?, step)?;
    let next = w - &g * config.eta_at(step);
    single_outcome(w, next, batch, g, step)
}

/// SAM with the first-order inner maximizer `ε* = ρ g / |g|`.
pub fn vanilla_sam_step<O: Objective + ?Sized>(
    w: &DVector<f64>,
    obj: &O,
    dataset: &Dataset,
    config: &TrainerConfig,
    step: usize,
) -> Result<StepOutcome> {
    let batch = single_batch(dataset, config, step)?;
    let g = finite_gradient(batch_gradient(obj, w, &batch.indices)?, step)?;
    let norm = g.norm();
    let eps = if norm < 1e-12 {
        DVector::zeros(w.len())
    } else {
        &g * (config.sam_rho / norm)
    };
    let perturbed = finite_gradient(batch_gradient(obj, &(w + eps), &batch.indices)?, step)?;
    let next = w - &perturbed * config.eta_at(step);
    single_outcome(w, next, batch, perturbed, step)
}

/// Average-direction SAM: steps along a Monte-Carlo estimate of
/// `E_{ε∼N(0,Σ)}[∇L^μ(w + ε)]` using `adsam_samples` draws (antithetic
/// when even). A zero `sigma` degenerates to [`sgd_step`] exactly.
pub fn adsam_step<O: Objective + ?Sized>(
    w: &DVector<f64>,
    obj: &O,
    dataset: &Dataset,
    sigma: &DMatrix<f64>,
    config: &TrainerConfig,
    step: usize,
) -> Result<StepOutcome> {
    let factor = PsdFactor::new(sigma)?;
    adsam_step_factored(w, obj, dataset, &factor, config, step)
}

pub(crate) fn adsam_step_factored<O: Objective + ?Sized>(
    w: &DVector<f64>,
    obj: &O,
    dataset: &Dataset,
    factor: &PsdFactor,
    config: &TrainerConfig,
    step: usize,
) -> Result<StepOutcome> {
    let batch = single_batch(dataset, config, step)?;
    let g = if factor.is_zero() {
        batch_gradient(obj, w, &batch.indices)?
    } else {
        let k = config.adsam_samples;
        let mut r = rng::stream(config.seed, Purpose::Smoothing, 0, step);
        gaussian_expectation(factor, k, DrawScheme::default_for(k), &mut r, |eps| {
            batch_gradient(obj, &(w + eps), &batch.indices)
        })?
        .mean
    };
    let g = finite_gradient(g, step)?;
    let next = w - &g * config.eta_at(step);
    single_outcome(w, next, batch, g, step)
}
