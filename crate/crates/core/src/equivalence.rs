//! Harness comparing D-SGD's expected update with the average-direction
//! SAM direction, residual scaling fits, the exhaustive mini-batch variance
//! identity, and paired D-SGD / C-SGD flatness runs.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    avg_direction_sharpness, consensus_distance, hessian_max_eigenvalue, landscape_slice_along, weight_diversity_matrix,
    LandscapeSlice,
};
use crate::engine::{csgd_step, dsgd_step, SamplingMode, TrainerConfig, WorkerEnsemble};
use crate::error::{LabError, Result};
use crate::linalg::PsdFactor;
use crate::montecarlo::{gaussian_expectation, DrawScheme, McVector};
use crate::objectives::{batch_gradient, batch_loss, Dataset, Objective};
use crate::rng::{self, Purpose};
use crate::topology::GossipMatrix;

/// Relative floor below which two deterministic directions are treated as
/// equal (accumulated rounding in sums over workers and samples).
pub const ROUNDING_FLOOR: f64 = 1e-11;

/// Expected averaged-model update direction of one D-SGD round from
/// `ensemble`, `E_μ[(w_a(t) − w_a(t+1))/η]`.
///
/// Because `P` is doubly stochastic the direction equals the mean of the
/// workers' applied gradients, which is what is averaged here. Each trial
/// reseeds batch draws from `(config.seed, trial)`. Full-batch sampling runs
/// a single deterministic trial.
pub fn expected_dsgd_direction<O: Objective + ?Sized>(
    obj: &O,
    ensemble: &WorkerEnsemble,
    p: &GossipMatrix,
    dataset: &Dataset,
    config: &TrainerConfig,
    trials: usize,
) -> Result<McVector> {
    if trials < 2 {
        return Err(LabError::InvalidArgument(format!("need at least 2 trials, got {trials}")));
    }
    let trials = if config.sampling == SamplingMode::FullBatch { 1 } else { trials };
    let directions: Vec<Result<DVector<f64>>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut cfg = config.clone();
            cfg.seed = rng::stream(config.seed, Purpose::Trial, t, 0).next_u64();
            let out = dsgd_step(ensemble, p, obj, dataset, &cfg, 0)?;
            let mut acc = DVector::zeros(ensemble.d());
            for g in &out.gradients {
                acc += g;
            }
            Ok(acc / ensemble.m() as f64)
        })
        .collect();
    let directions = directions.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(summarize(&directions))
}

fn summarize(units: &[DVector<f64>]) -> McVector {
    let n = units.len() as f64;
    let mut mean = DVector::zeros(units[0].len());
    for u in units {
        mean += u;
    }
    mean /= n;
    if units.len() < 2 {
        return McVector::exact(mean);
    }
    let mut var = DVector::zeros(mean.len());
    for u in units {
        let dev = u - &mean;
        var += dev.component_mul(&dev);
    }
    let stderr = (var / (n - 1.0) / n).map(f64::sqrt);
    McVector { mean, stderr }
}

/// `E_{ε∼N(0,Ξ)}[∇L(w_a + ε)]` over the full dataset with antithetic draws.
pub fn adsam_direction<O: Objective + ?Sized>(
    obj: &O,
    w_a: &DVector<f64>,
    xi: &DMatrix<f64>,
    dataset: &Dataset,
    k: usize,
    seed: u64,
) -> Result<McVector> {
    if k < 2 || !k.is_multiple_of(2) {
        return Err(LabError::InvalidArgument(format!("need an even draw count >= 2, got {k}")));
    }
    adsam_direction_with(obj, w_a, xi, dataset, k, DrawScheme::Antithetic, seed)
}

/// [`adsam_direction`] with an explicit draw scheme.
pub fn adsam_direction_with<O: Objective + ?Sized>(
    obj: &O,
    w_a: &DVector<f64>,
    xi: &DMatrix<f64>,
    dataset: &Dataset,
    k: usize,
    scheme: DrawScheme,
    seed: u64,
) -> Result<McVector> {
    let factor = PsdFactor::new(xi)?;
    let indices = dataset.all_indices();
    if factor.is_zero() {
        return Ok(McVector::exact(batch_gradient(obj, w_a, indices)?));
    }
    let mut r = rng::stream(seed, Purpose::Smoothing, 0, 0);
    gaussian_expectation(&factor, k, scheme, &mut r, |eps| batch_gradient(obj, &(w_a + eps), indices))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionComparison {
    pub displacement_scale: f64,
    pub dsgd_expected_direction: DVector<f64>,
    pub dsgd_stderr: DVector<f64>,
    pub adsam_direction: DVector<f64>,
    pub adsam_stderr: DVector<f64>,
    /// `∇L^μ(w_a)` over the full dataset.
    pub plain_gradient: DVector<f64>,
    pub residual_norm: f64,
    /// `3·|combined stderr|` plus a rounding floor relative to the
    /// direction magnitude.
    pub noise_floor: f64,
}

impl DirectionComparison {
    pub fn within_noise(&self) -> bool {
        self.residual_norm <= self.noise_floor
    }
}

/// Settings shared by direction comparisons at different scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSettings {
    pub trials: usize,
    pub draws: usize,
    pub scheme: DrawScheme,
    pub seed: u64,
}

pub fn compare_directions<O: Objective + ?Sized>(
    obj: &O,
    ensemble: &WorkerEnsemble,
    p: &GossipMatrix,
    dataset: &Dataset,
    config: &TrainerConfig,
    settings: &ComparisonSettings,
    displacement_scale: f64,
) -> Result<DirectionComparison> {
    let dsgd = expected_dsgd_direction(obj, ensemble, p, dataset, config, settings.trials)?;
    let w_a = ensemble.averaged_model();
    let xi = weight_diversity_matrix(ensemble)?;
    let adsam = adsam_direction_with(obj, &w_a, &xi, dataset, settings.draws, settings.scheme, settings.seed)?;
    let plain = batch_gradient(obj, &w_a, dataset.all_indices())?;
    let combined = dsgd
        .stderr
        .zip_map(&adsam.stderr, |a, b| (a * a + b * b).sqrt())
        .norm();
    let magnitude = dsgd.mean.norm().max(adsam.mean.norm()).max(1.0);
    Ok(DirectionComparison {
        displacement_scale,
        residual_norm: (&dsgd.mean - &adsam.mean).norm(),
        noise_floor: 3.0 * combined + ROUNDING_FLOOR * magnitude,
        dsgd_expected_direction: dsgd.mean,
        dsgd_stderr: dsgd.stderr,
        adsam_direction: adsam.mean,
        adsam_stderr: adsam.stderr,
        plain_gradient: plain,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub scales: Vec<f64>,
    pub residuals: Vec<f64>,
    pub noise_floors: Vec<f64>,
    /// Points whose residual clears ten times their noise floor.
    pub included: Vec<bool>,
    /// Log-log least-squares slope; `None` with fewer than two usable
    /// points, which means the directions agree at every scale.
    pub slope: Option<f64>,
    pub slope_stderr: Option<f64>,
    pub intercept: Option<f64>,
}

impl ScalingFit {
    pub fn is_exact_equivalence(&self) -> bool {
        self.included.iter().all(|i| !i)
    }
}

/// Shrinks the worker displacements of `base` to `c·(w_j − w_a)` for each
/// scale, measures the D-SGD vs average-direction residual, and fits
/// `log residual = slope·log c + intercept`.
pub fn residual_scaling_fit<O: Objective + ?Sized>(
    obj: &O,
    base: &WorkerEnsemble,
    p: &GossipMatrix,
    dataset: &Dataset,
    config: &TrainerConfig,
    scales: &[f64],
    settings: &ComparisonSettings,
) -> Result<ScalingFit> {
    if config.sampling != SamplingMode::FullBatch {
        return Err(LabError::InvalidArgument("residual scaling fits need full-batch sampling".into()));
    }
    if scales.len() < 4 {
        return Err(LabError::InvalidArgument(format!("need at least 4 scales, got {}", scales.len())));
    }
    if scales.iter().any(|&c| !(c > 0.0 && c <= 1.0)) || scales.windows(2).any(|w| w[1] >= w[0]) {
        return Err(LabError::InvalidArgument("scales must be strictly decreasing within (0, 1]".into()));
    }
    let comparisons: Vec<Result<DirectionComparison>> = scales
        .par_iter()
        .map(|&c| compare_directions(obj, &base.scaled_about_mean(c), p, dataset, config, settings, c))
        .collect();
    let comparisons = comparisons.into_iter().collect::<Result<Vec<_>>>()?;
    let residuals: Vec<f64> = comparisons.iter().map(|c| c.residual_norm).collect();
    let noise_floors: Vec<f64> = comparisons.iter().map(|c| c.noise_floor).collect();
    let included: Vec<bool> = residuals.iter().zip(&noise_floors).map(|(r, f)| *r >= 10.0 * f).collect();
    let pts: Vec<(f64, f64)> = scales
        .iter()
        .zip(&residuals)
        .zip(&included)
        .filter(|(_, inc)| **inc)
        .map(|((c, r), _)| (c.ln(), r.ln()))
        .collect();
    let (slope, slope_stderr, intercept) = match least_squares(&pts) {
        Some((s, se, b)) => (Some(s), se, Some(b)),
        None => (None, None, None),
    };
    Ok(ScalingFit {
        scales: scales.to_vec(),
        residuals,
        noise_floors,
        included,
        slope,
        slope_stderr,
        intercept,
    })
}

/// Slope, slope standard error (needs three points), intercept.
fn least_squares(pts: &[(f64, f64)]) -> Option<(f64, Option<f64>, f64)> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let stderr = (pts.len() > 2).then(|| {
        let ssr = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>();
        (ssr / (n - 2.0) / sxx).sqrt()
    });
    Some((slope, stderr, intercept))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceIdentity {
    pub n: usize,
    pub batch: usize,
    pub partitions: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub relative_error: f64,
}

/// Largest set size for which partitions are enumerated.
pub const MAX_ENUMERATED: usize = 10;

/// Averages `(1/(mB²)) Σ_i |Σ_{j∈batch_i} (V_j − V̄)|²` over every
/// partition of the vectors into `N/B` batches of size `B`, and compares it
/// with `((N−B)/((N−1)B)) · (1/N) Σ_j |V_j − V̄|²`.
pub fn minibatch_variance_identity_check(vectors: &[DVector<f64>], batch: usize) -> Result<VarianceIdentity> {
    let n = vectors.len();
    if n == 0 || n > MAX_ENUMERATED {
        return Err(LabError::InvalidArgument(format!("need 1..={MAX_ENUMERATED} vectors, got {n}")));
    }
    if batch == 0 || !n.is_multiple_of(batch) {
        return Err(LabError::InvalidArgument(format!("batch size {batch} does not divide {n}")));
    }
    let d = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != d) {
        return Err(LabError::DimensionMismatch {
            expected: d,
            actual: v.len(),
            context: "gradient set",
        });
    }
    let mut mean = DVector::zeros(d);
    for v in vectors {
        mean += v;
    }
    mean /= n as f64;
    let centered: Vec<DVector<f64>> = vectors.iter().map(|v| v - &mean).collect();
    let m = n / batch;

    let mut total = 0.0;
    let mut count = 0usize;
    let mut used = vec![false; n];
    enumerate_partitions(&centered, batch, &mut used, 0.0, &mut total, &mut count);
    let lhs = total / count as f64 / (m * batch * batch) as f64;

    let spread = centered.iter().map(|v| v.norm_squared()).sum::<f64>() / n as f64;
    let rhs = if batch == n {
        0.0
    } else {
        (n - batch) as f64 / ((n - 1) * batch) as f64 * spread
    };
    let relative_error = if rhs == 0.0 {
        if lhs.abs() <= f64::EPSILON * spread.max(1.0) {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (lhs - rhs).abs() / rhs
    };
    Ok(VarianceIdentity {
        n,
        batch,
        partitions: count,
        lhs,
        rhs,
        relative_error,
    })
}

/// Visits each unordered partition once: the lowest unused index always
/// opens the next batch.
fn enumerate_partitions(
    v: &[DVector<f64>],
    batch: usize,
    used: &mut [bool],
    acc: f64,
    total: &mut f64,
    count: &mut usize,
) {
    let Some(first) = used.iter().position(|u| !u) else {
        *total += acc;
        *count += 1;
        return;
    };
    used[first] = true;
    let mut members = vec![first];
    fill_batch(v, batch, used, &mut members, first + 1, acc, total, count);
    used[first] = false;
}

#[allow(clippy::too_many_arguments)]
fn fill_batch(
    v: &[DVector<f64>],
    batch: usize,
    used: &mut [bool],
    members: &mut Vec<usize>,
    from: usize,
    acc: f64,
    total: &mut f64,
    count: &mut usize,
) {
    if members.len() == batch {
        let mut sum = DVector::zeros(v[0].len());
        for &i in members.iter() {
            sum += &v[i];
        }
        enumerate_partitions(v, batch, used, acc + sum.norm_squared(), total, count);
        return;
    }
    for i in from..v.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        members.push(i);
        fill_batch(v, batch, used, members, i + 1, acc, total, count);
        members.pop();
        used[i] = false;
    }
}

/// Paired D-SGD / C-SGD runs stopped at a common training-loss threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSetup {
    /// Shared by both runs; `algorithm` is ignored.
    pub trainer: TrainerConfig,
    pub init: DVector<f64>,
    pub loss_threshold: f64,
    /// Loss is checked every this many steps.
    pub check_every: usize,
    /// Isotropic probe covariance `σ²I` for the sharpness estimate.
    pub probe_sigma2: f64,
    pub probe_draws: usize,
    /// Extent and resolution of a 1d slice along a shared random direction.
    pub landscape: Option<(f64, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEndpoint {
    pub steps: usize,
    pub train_loss: f64,
    pub consensus_distance: f64,
    pub lambda_max: f64,
    pub sharpness: f64,
    pub sharpness_stderr: f64,
    pub landscape: Option<LandscapeSlice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceReport {
    pub dsgd: RunEndpoint,
    pub csgd: RunEndpoint,
    pub lambda_max_difference: f64,
    pub sharpness_difference: f64,
}

impl PreferenceReport {
    /// D-SGD endpoint is no sharper than C-SGD's by the top Hessian eigenvalue.
    pub fn dsgd_flatter(&self) -> bool {
        self.dsgd.lambda_max <= self.csgd.lambda_max
    }
}

pub fn sharpness_preference_comparison<O: Objective + ?Sized>(
    obj: &O,
    dataset: &Dataset,
    p: &GossipMatrix,
    setup: &PreferenceSetup,
) -> Result<PreferenceReport> {
    setup.trainer.validate()?;
    if setup.check_every == 0 {
        return Err(LabError::InvalidArgument("check_every must be at least 1".into()));
    }
    let m = p.m();
    let start = WorkerEnsemble::replicated(&setup.init, m);
    let direction = {
        use rand_distr::{Distribution, StandardNormal};
        let mut r = rng::stream(setup.trainer.seed, Purpose::Landscape, 0, 0);
        let v = DVector::from_fn(obj.dim(), |_, _| StandardNormal.sample(&mut r));
        v.normalize()
    };
    let run = |decentralized: bool| -> Result<RunEndpoint> {
        let all = dataset.all_indices();
        let mut e = start.clone();
        let mut step = 0;
        loop {
            if step % setup.check_every == 0 || step == setup.trainer.steps {
                let loss = batch_loss(obj, &e.averaged_model(), all)?;
                if loss <= setup.loss_threshold {
                    break;
                }
                if step >= setup.trainer.steps {
                    return Err(LabError::InvalidArgument(format!(
                        "{} run missed loss threshold {} within {} steps (loss {loss})",
                        if decentralized { "dsgd" } else { "csgd" },
                        setup.loss_threshold,
                        setup.trainer.steps
                    )));
                }
            }
            e = if decentralized {
                dsgd_step(&e, p, obj, dataset, &setup.trainer, step)?.post
            } else {
                csgd_step(&e, obj, dataset, &setup.trainer, step)?.post
            };
            step += 1;
        }
        let w = e.averaged_model();
        let probe = DMatrix::identity(obj.dim(), obj.dim()) * setup.probe_sigma2;
        let sharp = avg_direction_sharpness(obj, &w, &probe, setup.probe_draws, all, setup.trainer.seed)?;
        let landscape = match setup.landscape {
            Some((extent, res)) => Some(landscape_slice_along(obj, &w, all, vec![direction.clone()], extent, res)?),
            None => None,
        };
        Ok(RunEndpoint {
            steps: step,
            train_loss: batch_loss(obj, &w, all)?,
            consensus_distance: consensus_distance(&e),
            lambda_max: hessian_max_eigenvalue(obj, &w, all)?,
            sharpness: sharp.mean,
            sharpness_stderr: sharp.stderr,
            landscape,
        })
    };
    let dsgd = run(true)?;
    let csgd = run(false)?;
    Ok(PreferenceReport {
        lambda_max_difference: dsgd.lambda_max - csgd.lambda_max,
        sharpness_difference: dsgd.sharpness - csgd.sharpness,
        dsgd,
        csgd,
    })
}
