//! Measurements taken from ensemble snapshots: weight diversity, consensus
//! distance, gradient diversity, sharpness functionals, implicit
//! regularizers, the smoothing bound, the consensus descent condition, and
//! loss-landscape slices.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::engine::{SamplingMode, TrainerConfig, WorkerEnsemble};
use crate::error::{LabError, Result};
use crate::linalg::{frobenius_inner, symmetric_eigen, PsdFactor};
use crate::montecarlo::{gaussian_expectation, gaussian_expectation_scalar, DrawScheme, McScalar};
use crate::objectives::{
    batch_gradient, batch_hessian, batch_loss, Batch, Dataset, Objective, MAX_DENSE_DIM,
};
use crate::rng::{self, Purpose};
use crate::topology::{gossip_mix, spectral_report, GossipMatrix};

/// `Ξ = (1/m) Σ_j (w_j − w_a)(w_j − w_a)ᵀ`, exactly symmetric.
pub fn weight_diversity_matrix(ensemble: &WorkerEnsemble) -> Result<DMatrix<f64>> {
    let d = ensemble.d();
    if d > MAX_DENSE_DIM {
        return Err(LabError::DimensionGuard {
            d,
            limit: MAX_DENSE_DIM,
        });
    }
    let wa = ensemble.averaged_model();
    let devs: Vec<DVector<f64>> = (0..ensemble.m()).map(|j| ensemble.worker(j) - &wa).collect();
    let m = ensemble.m() as f64;
    let mut xi = DMatrix::zeros(d, d);
    for l in 0..d {
        for s in l..d {
            let v = devs.iter().map(|e| e[l] * e[s]).sum::<f64>() / m;
            xi[(l, s)] = v;
            xi[(s, l)] = v;
        }
    }
    Ok(xi)
}

/// `Tr(Ξ) = (1/m) Σ_j |w_j − w_a|²`, without materializing `Ξ`.
pub fn consensus_distance(ensemble: &WorkerEnsemble) -> f64 {
    let wa = ensemble.averaged_model();
    (0..ensemble.m())
        .map(|j| (ensemble.worker(j) - &wa).norm_squared())
        .sum::<f64>()
        / ensemble.m() as f64
}

/// `(1/m) Σ_j |w_j − w_a|³`.
pub fn mean_cubed_deviation(ensemble: &WorkerEnsemble) -> f64 {
    let wa = ensemble.averaged_model();
    (0..ensemble.m())
        .map(|j| (ensemble.worker(j) - &wa).norm().powi(3))
        .sum::<f64>()
        / ensemble.m() as f64
}

/// `(1/m) Σ_j (∇L^{μ_j}(w_j) − ∇L^{μ_j}(w_a))`: the extra drift
/// decentralization adds to the averaged model's update.
pub fn gradient_diversity<O: Objective + ?Sized>(
    obj: &O,
    ensemble: &WorkerEnsemble,
    batches: &[Batch],
) -> Result<DVector<f64>> {
    if batches.len() != ensemble.m() {
        return Err(LabError::DimensionMismatch {
            expected: ensemble.m(),
            actual: batches.len(),
            context: "one batch per worker",
        });
    }
    let wa = ensemble.averaged_model();
    let mut acc = DVector::zeros(ensemble.d());
    for (j, b) in batches.iter().enumerate() {
        let wj = ensemble.worker(j);
        if wj == wa {
            continue;
        }
        acc += batch_gradient(obj, &wj, &b.indices)? - batch_gradient(obj, &wa, &b.indices)?;
    }
    Ok(acc / ensemble.m() as f64)
}

/// Monte-Carlo estimate of `E_{ε∼N(0,Ξ)}[L(w+ε) − L(w)]` over `indices`.
pub fn avg_direction_sharpness<O: Objective + ?Sized>(
    obj: &O,
    w: &DVector<f64>,
    xi: &DMatrix<f64>,
    k: usize,
    indices: &[usize],
    seed: u64,
) -> Result<McScalar> {
    let factor = PsdFactor::new(xi)?;
    if factor.is_zero() {
        return Ok(McScalar {
            mean: 0.0,
            stderr: 0.0,
        });
    }
    let base = batch_loss(obj, w, indices)?;
    let mut r = rng::stream(seed, Purpose::Sharpness, 0, 0);
    gaussian_expectation_scalar(&factor, k, DrawScheme::default_for(k), &mut r, |eps| {
        Ok(batch_loss(obj, &(w + eps), indices)? - base)
    })
}

/// `Tr(H(w) Ξ) = Σ_{l,s} H_ls Ξ_ls`.
pub fn hessian_consensus_alignment<O: Objective + ?Sized>(
    obj: &O,
    w: &DVector<f64>,
    xi: &DMatrix<f64>,
    indices: &[usize],
) -> Result<f64> {
    let h = batch_hessian(obj, w, indices)?;
    if xi.shape() != h.shape() {
        return Err(LabError::DimensionMismatch {
            expected: h.nrows(),
            actual: xi.nrows(),
            context: "weight diversity matrix",
        });
    }
    Ok(frobenius_inner(&h, xi))
}

/// Itemized implicit-regularization objective.
///
/// `total = base_loss + sharpness + sharpness_quadratic + gradient_norm
///        + kappa · (gradient_variance + hessian_variance)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularizerReport {
    pub eta: f64,
    pub total_batch: usize,
    pub n: usize,
    /// `(η/B)(N−B)/(N−1)`.
    pub kappa: f64,
    pub base_loss: f64,
    /// `(η/4)|∇L^μ|²`.
    pub gradient_norm: f64,
    /// `Tr(H^μ Ξ)`.
    pub sharpness: f64,
    /// `(η/4) Tr((H^μ)² Ξ)`.
    pub sharpness_quadratic: f64,
    /// `(1/N) Σ_j |∇L^j − ∇L^μ|²` (unweighted).
    pub gradient_variance: f64,
    /// `(1/N) Σ_j Tr((H^j − H^μ)² Ξ)` (unweighted).
    pub hessian_variance: f64,
    pub total: f64,
}

pub fn kappa(eta: f64, b: usize, n: usize) -> f64 {
    if b >= n {
        return 0.0;
    }
    (eta / b as f64) * (n - b) as f64 / (n - 1) as f64
}

fn regularizer_report<O: Objective + ?Sized>(
    obj: &O,
    w: &DVector<f64>,
    xi: Option<&DMatrix<f64>>,
    eta: f64,
    b: usize,
) -> Result<RegularizerReport> {
    let n = obj.num_samples();
    if b == 0 || b > n {
        return Err(LabError::InvalidArgument(format!("total batch {b} outside 1..={n}")));
    }
    let all: Vec<usize> = (0..n).collect();
    let base_loss = batch_loss(obj, w, &all)?;
    let per_sample: Vec<DVector<f64>> = all.iter().map(|&i| obj.sample_gradient(w, i)).collect();
    let mut mean_grad = DVector::zeros(obj.dim());
    for g in &per_sample {
        mean_grad += g;
    }
    mean_grad /= n as f64;
    let gradient_variance = per_sample
        .iter()
        .map(|g| (g - &mean_grad).norm_squared())
        .sum::<f64>()
        / n as f64;

    let xi = xi.filter(|x| x.iter().any(|&v| v != 0.0));
    let (sharpness, sharpness_quadratic, hessian_variance) = match xi {
        None => (0.0, 0.0, 0.0),
        Some(xi) => {
            let mean_h = batch_hessian(obj, w, &all)?;
            let sharp = frobenius_inner(&mean_h, xi);
            let quad = eta / 4.0 * frobenius_inner(&(&mean_h * &mean_h), xi);
            let mut hv = 0.0;
            for i in &all {
                let diff = batch_hessian(obj, w, std::slice::from_ref(i))? - &mean_h;
                hv += frobenius_inner(&(&diff * &diff), xi);
            }
            (sharp, quad, hv / n as f64)
        }
    };
    let kappa = kappa(eta, b, n);
    let gradient_norm = eta / 4.0 * mean_grad.norm_squared();
    let total = base_loss + sharpness + sharpness_quadratic + gradient_norm + kappa * (gradient_variance + hessian_variance);
    Ok(RegularizerReport {
        eta,
        total_batch: b,
        n,
        kappa,
        base_loss,
        gradient_norm,
        sharpness,
        sharpness_quadratic,
        gradient_variance,
        hessian_variance,
        total,
    })
}

/// Implicit objective of (centralized) SGD with total batch `b`.
pub fn implicit_regularizer_sgd<O: Objective + ?Sized>(
    obj: &O,
    w: &DVector<f64>,
    eta: f64,
    b: usize,
) -> Result<RegularizerReport> {
    regularizer_report(obj, w, None, eta, b)
}

/// Implicit objective of D-SGD with weight diversity `xi` and total batch `b`.
pub fn implicit_regularizer_dsgd<O: Objective + ?Sized>(
    obj: &O,
    w: &DVector<f64>,
    xi: &DMatrix<f64>,
    eta: f64,
    b: usize,
) -> Result<RegularizerReport> {
    if obj.dim() > MAX_DENSE_DIM {
        return Err(LabError::DimensionGuard {
            d: obj.dim(),
            limit: MAX_DENSE_DIM,
        });
    }
    regularizer_report(obj, w, Some(xi), eta, b)
}

/// Axis-aligned region in which Lipschitz constants are probed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRegion {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

impl ProbeRegion {
    pub fn cube(d: usize, half_width: f64) -> Self {
        Self {
            lower: DVector::from_element(d, -half_width),
            upper: DVector::from_element(d, half_width),
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.lower.len(), |i, _| {
            let (lo, hi) = (self.lower[i], self.upper[i]);
            if hi > lo {
                rng.random_range(lo..hi)
            } else {
                lo
            }
        })
    }

    fn diameter(&self) -> f64 {
        (&self.upper - &self.lower).norm()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingReport {
    /// Estimated Lipschitz constant of the loss.
    pub alpha: f64,
    /// Estimated Lipschitz constant of the gradient.
    pub beta: f64,
    /// Smallest eigenvalue of `Ξ`.
    pub sigma_min: f64,
    /// `√2·α/σ_min`; infinite when `σ_min ≤ 0`.
    pub first_branch: f64,
    /// `min{√2·α/σ_min, β}`.
    pub theoretical_bound: f64,
    /// Pairwise Lipschitz estimate of the Monte-Carlo smoothed gradient.
    pub empirical_smoothed_lipschitz: f64,
    /// Monte-Carlo standard error of the maximizing difference quotient.
    pub mc_stderr: f64,
}

/// Probes the Lipschitz constants of `∇L` and of the Gaussian-smoothed
/// gradient `E_ε[∇L(· + ε)]`, `ε ∼ N(0, Ξ)`, on a user-declared region.
///
/// Half of the probe pairs are drawn independently over the region, half
/// as close pairs (separation up to 1e-3 of the region diameter) so sharp
/// curvature features are not missed. The smoothed gradient uses the same
/// `k` draws at every probe point.
pub fn smoothing_report<O: Objective + ?Sized>(
    obj: &O,
    xi: &DMatrix<f64>,
    region: &ProbeRegion,
    n_probes: usize,
    k: usize,
    seed: u64,
) -> Result<SmoothingReport> {
    let d = obj.dim();
    if region.lower.len() != d || xi.nrows() != d {
        return Err(LabError::DimensionMismatch {
            expected: d,
            actual: region.lower.len(),
            context: "probe region / weight diversity",
        });
    }
    let all: Vec<usize> = (0..obj.num_samples()).collect();
    let factor = PsdFactor::new(xi)?;
    let sigma_min = factor.smallest_eigenvalue();

    let mut r = rng::stream(seed, Purpose::Probe, 0, 0);
    let close = 1e-3 * region.diameter().max(f64::MIN_POSITIVE);
    let pairs: Vec<(DVector<f64>, DVector<f64>)> = (0..n_probes)
        .map(|p| {
            let x = region.sample(&mut r);
            let y = if p % 2 == 0 {
                region.sample(&mut r)
            } else {
                let dir = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
                let len = r.random_range(0.0..close);
                &x + dir.normalize() * len
            };
            (x, y)
        })
        .filter(|(x, y)| x != y)
        .collect();

    let mut alpha = 0.0f64;
    let mut beta = 0.0f64;
    for (x, y) in &pairs {
        let gx = batch_gradient(obj, x, &all)?;
        let gy = batch_gradient(obj, y, &all)?;
        alpha = alpha.max(gx.norm()).max(gy.norm());
        beta = beta.max((gx - gy).norm() / (x - y).norm());
    }

    // Common random numbers: one set of draws shared by every probe point.
    let draws: Vec<DVector<f64>> = {
        let mut dr = rng::stream(seed, Purpose::Smoothing, 0, 0);
        let scheme = DrawScheme::default_for(k);
        let mut collected = Vec::with_capacity(k);
        gaussian_expectation(&factor, k, scheme, &mut dr, |eps| {
            collected.push(eps.clone());
            Ok(DVector::zeros(1))
        })?;
        collected
    };
    // Draws arrive as consecutive ± pairs when `k` is even; each pair is
    // one independent unit for the standard error.
    let unit = if k.is_multiple_of(2) { 2 } else { 1 };
    let quotient = |x: &DVector<f64>, y: &DVector<f64>| -> Result<(f64, f64)> {
        let dist = (x - y).norm();
        let diffs = draws
            .iter()
            .map(|eps| Ok(batch_gradient(obj, &(x + eps), &all)? - batch_gradient(obj, &(y + eps), &all)?))
            .collect::<Result<Vec<DVector<f64>>>>()?;
        let mut mean = DVector::zeros(d);
        for g in &diffs {
            mean += g;
        }
        mean /= diffs.len() as f64;
        let norm = mean.norm();
        if norm == 0.0 {
            return Ok((0.0, 0.0));
        }
        let dir = &mean / norm;
        let units: Vec<f64> = diffs
            .chunks(unit)
            .map(|c| c.iter().map(|g| g.dot(&dir)).sum::<f64>() / c.len() as f64 / dist)
            .collect();
        let n = units.len() as f64;
        let mu = units.iter().sum::<f64>() / n;
        let var = units.iter().map(|u| (u - mu).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Ok((norm / dist, (var / n).sqrt()))
    };
    let mut empirical = 0.0f64;
    let mut mc_stderr = 0.0f64;
    for (x, y) in &pairs {
        let (q, se) = quotient(x, y)?;
        if q > empirical {
            empirical = q;
            mc_stderr = se;
        }
    }

    let first_branch = if sigma_min > 0.0 {
        2f64.sqrt() * alpha / sigma_min
    } else {
        f64::INFINITY
    };
    Ok(SmoothingReport {
        alpha,
        beta,
        sigma_min,
        first_branch,
        theoretical_bound: first_branch.min(beta),
        empirical_smoothed_lipschitz: empirical,
        mc_stderr,
    })
}

/// One step of the consensus-distance descent check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentStep {
    pub step: usize,
    pub trace_before: f64,
    /// `Tr(Ξ)` of `P W(t)`, before any gradient is applied.
    pub trace_after_mixing: f64,
    pub trace_after: f64,
    /// `(1/m) Σ_j |∇L(w_j)|²` at the pre-step iterates.
    pub mean_sq_gradient: f64,
    /// `(1/m) Σ_j E|∇L^{μ_j}(w_j) − ∇L(w_j)|²` for the configured sampling.
    pub gradient_noise: f64,
    /// Learning-rate threshold `η*(t)`.
    pub eta_threshold: f64,
    pub eta: f64,
    pub eligible: bool,
    pub descended: bool,
}

impl DescentStep {
    /// Eligible for the guarantee yet the consensus distance grew.
    pub fn is_violation(&self) -> bool {
        self.eligible && !self.descended
    }
}

/// Learning-rate threshold below which the consensus distance cannot grow:
/// `η* = Tr(Ξ)(1−λ) / (√6 λ^{1/2}) · [G + (1−λ)V]^{−1/2}`.
pub fn descent_threshold(trace: f64, lambda: f64, mean_sq_gradient: f64, noise: f64) -> f64 {
    if trace <= 0.0 {
        return 0.0;
    }
    let bracket = mean_sq_gradient + (1.0 - lambda) * noise;
    if lambda <= 0.0 || bracket <= 0.0 {
        return f64::INFINITY;
    }
    trace * (1.0 - lambda) / (6f64.sqrt() * lambda.sqrt()) / bracket.sqrt()
}

/// Evaluates the descent condition over consecutive snapshots
/// `history[t] → history[t+1]` of a D-SGD run.
pub fn descent_condition_check<O: Objective + ?Sized>(
    history: &[WorkerEnsemble],
    obj: &O,
    dataset: &Dataset,
    p: &GossipMatrix,
    config: &TrainerConfig,
) -> Result<Vec<DescentStep>> {
    let lambda = spectral_report(p)?.lambda;
    let mut out = Vec::with_capacity(history.len().saturating_sub(1));
    for (t, pair) in history.windows(2).enumerate() {
        let (before, after) = (&pair[0], &pair[1]);
        let m = before.m();
        let mut mean_sq = 0.0;
        let mut noise = 0.0;
        for j in 0..m {
            let shard = dataset.shard(j);
            let wj = before.worker(j);
            let per_sample: Vec<DVector<f64>> = shard.iter().map(|&i| obj.sample_gradient(&wj, i)).collect();
            let mut g = DVector::zeros(obj.dim());
            for s in &per_sample {
                g += s;
            }
            g /= shard.len() as f64;
            mean_sq += g.norm_squared();
            let var = per_sample.iter().map(|s| (s - &g).norm_squared()).sum::<f64>() / shard.len() as f64;
            noise += match config.sampling {
                SamplingMode::FullBatch => 0.0,
                SamplingMode::Iid => var / config.local_batch as f64,
                // Without replacement from the global pool.
                SamplingMode::EpochPartition => {
                    let n = shard.len();
                    let b = config.local_batch.min(n);
                    if n > 1 {
                        var / b as f64 * (n - b) as f64 / (n - 1) as f64
                    } else {
                        0.0
                    }
                }
            };
        }
        mean_sq /= m as f64;
        noise /= m as f64;
        let trace_before = consensus_distance(before);
        let trace_after = consensus_distance(after);
        let mixed = WorkerEnsemble::from_rows(gossip_mix(p, before.weights())?);
        let eta = config.eta_at(t);
        let threshold = descent_threshold(trace_before, lambda, mean_sq, noise);
        out.push(DescentStep {
            step: t,
            trace_before,
            trace_after_mixing: consensus_distance(&mixed),
            trace_after,
            mean_sq_gradient: mean_sq,
            gradient_noise: noise,
            eta_threshold: threshold,
            eta,
            eligible: eta <= threshold,
            descended: trace_after <= trace_before,
        });
    }
    Ok(out)
}

/// Largest eigenvalue of the mean Hessian over `indices`.
pub fn hessian_max_eigenvalue<O: Objective + ?Sized>(obj: &O, w: &DVector<f64>, indices: &[usize]) -> Result<f64> {
    let h = batch_hessian(obj, w, indices)?;
    Ok(symmetric_eigen(&h)?.values[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceMode {
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "2d")]
    TwoD,
}

/// Loss values on a regular grid around a center point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSlice {
    pub mode: SliceMode,
    /// Grid coordinates along each direction (shared by both axes).
    pub coords: Vec<f64>,
    /// Row-major: `values[a * coords.len() + b]` is at `coords[a]` on the
    /// first direction and `coords[b]` on the second.
    pub values: Vec<f64>,
    pub directions: Vec<DVector<f64>>,
}

impl LandscapeSlice {
    /// CSV with header `x,loss` (1d) or `x,y,loss` (2d).
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self.mode {
            SliceMode::OneD => {
                out.push_str("x,loss\n");
                for (x, v) in self.coords.iter().zip(&self.values) {
                    out.push_str(&format!("{x},{v}\n"));
                }
            }
            SliceMode::TwoD => {
                out.push_str("x,y,loss\n");
                let n = self.coords.len();
                for a in 0..n {
                    for b in 0..n {
                        out.push_str(&format!("{},{},{}\n", self.coords[a], self.coords[b], self.values[a * n + b]));
                    }
                }
            }
        }
        out
    }

    pub fn center_value(&self) -> f64 {
        let n = self.coords.len();
        match self.mode {
            SliceMode::OneD => self.values[n / 2],
            SliceMode::TwoD => self.values[(n / 2) * n + n / 2],
        }
    }
}

/// Evaluates the loss on a grid spanned by explicit `directions`
/// (one for 1d, two for 2d) over `[-extent, extent]`.
pub fn landscape_slice_along<O: Objective + ?Sized>(
    obj: &O,
    center: &DVector<f64>,
    indices: &[usize],
    directions: Vec<DVector<f64>>,
    extent: f64,
    resolution: usize,
) -> Result<LandscapeSlice> {
    let mode = match directions.len() {
        1 => SliceMode::OneD,
        2 => SliceMode::TwoD,
        n => {
            return Err(LabError::InvalidArgument(format!(
                "landscape slices take one or two directions, got {n}"
            )))
        }
    };
    if resolution < 3 {
        return Err(LabError::InvalidArgument("landscape resolution must be at least 3".into()));
    }
    let coords: Vec<f64> = if extent == 0.0 {
        vec![0.0]
    } else {
        // Odd resolutions put a grid point exactly on the center.
        let res = if resolution.is_multiple_of(2) { resolution + 1 } else { resolution };
        let half = (res / 2) as f64;
        (0..res).map(|i| extent * (i as f64 - half) / half).collect()
    };
    let mut values = Vec::new();
    match mode {
        SliceMode::OneD => {
            for &a in &coords {
                let w = center + &directions[0] * a;
                values.push(batch_loss(obj, &w, indices)?);
            }
        }
        SliceMode::TwoD => {
            for &a in &coords {
                for &b in &coords {
                    let w = center + &directions[0] * a + &directions[1] * b;
                    values.push(batch_loss(obj, &w, indices)?);
                }
            }
        }
    }
    Ok(LandscapeSlice {
        mode,
        coords,
        values,
        directions,
    })
}

/// Random orthonormal slice directions. Network objectives get filter
/// normalization: each filter block of a direction is rescaled to the norm
/// of the matching block of `center`.
pub fn landscape_slice<O: Objective + ?Sized>(
    obj: &O,
    center: &DVector<f64>,
    indices: &[usize],
    mode: SliceMode,
    extent: f64,
    resolution: usize,
    seed: u64,
) -> Result<LandscapeSlice> {
    let d = obj.dim();
    let count = match mode {
        SliceMode::OneD => 1,
        SliceMode::TwoD => 2,
    };
    let mut r = rng::stream(seed, Purpose::Landscape, 0, 0);
    let mut dirs: Vec<DVector<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v = DVector::from_fn(d, |_, _| r.sample::<f64, _>(StandardNormal));
        for u in &dirs {
            v -= u * u.dot(&v);
        }
        dirs.push(v.normalize());
    }
    if let Some(groups) = obj.filter_groups() {
        for dir in &mut dirs {
            for g in &groups {
                let wn = center.rows(g.start, g.len()).norm();
                let dn = dir.rows(g.start, g.len()).norm();
                let scale = if dn > 0.0 { wn / dn } else { 0.0 };
                dir.rows_mut(g.start, g.len()).scale_mut(scale);
            }
        }
    }
    landscape_slice_along(obj, center, indices, dirs, extent, resolution)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{dsgd_step, WorkerEnsemble};
    use crate::objectives::{full_loss, make_cubic_perturbed, make_mlp, make_quadratic, DatasetKind, PolySample, PolynomialObjective};
    use crate::topology::{build_topology, TopologyKind};

    fn iso_quadratic(d: usize) -> PolynomialObjective {
        PolynomialObjective::new(
            vec![PolySample {
                h: DMatrix::identity(d, d),
                b: DVector::zeros(d),
                c: DVector::zeros(d),
            }],
            0.0,
            0.0,
        )
    }

    fn full_batches(m: usize, n: usize) -> Vec<Batch> {
        (0..m).map(|j| Batch::new(j, (0..n).collect())).collect()
    }

    #[test]
    fn weight_diversity_by_hand() {
        let e = WorkerEnsemble::from_vectors(&[DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![-1.0, 0.0])]);
        let xi = weight_diversity_matrix(&e).unwrap();
        assert_eq!(xi, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let same = WorkerEnsemble::replicated(&DVector::from_vec(vec![3.0, 2.0]), 4);
        assert_eq!(weight_diversity_matrix(&same).unwrap(), DMatrix::zeros(2, 2));

        let rnd = WorkerEnsemble::with_offsets(&DVector::zeros(5), 7, 0.8, 3);
        let xi = weight_diversity_matrix(&rnd).unwrap();
        assert!((xi.trace() - consensus_distance(&rnd)).abs() < 1e-12);
        assert_eq!(xi, xi.transpose());
    }

    #[test]
    fn gradient_diversity_cases() {
        let (quad, ds) = make_quadratic(4, 5, 1);
        let e = WorkerEnsemble::with_offsets(&DVector::zeros(4), 6, 1.0, 2);
        let g = gradient_diversity(&quad, &e, &full_batches(6, ds.len())).unwrap();
        assert!(g.amax() <= 1e-10);

        let (cubic, cds) = make_cubic_perturbed(4, 5, 1, 1.0);
        let same = WorkerEnsemble::replicated(&DVector::from_element(4, 0.3), 6);
        assert_eq!(gradient_diversity(&cubic, &same, &full_batches(6, cds.len())).unwrap(), DVector::zeros(4));

        let pure = PolynomialObjective::pure_cubic();
        let delta = 0.3;
        let pair = WorkerEnsemble::from_vectors(&[DVector::from_element(1, delta), DVector::from_element(1, -delta)]);
        let g = gradient_diversity(&pure, &pair, &full_batches(2, 1)).unwrap();
        assert!((g[0] - 3.0 * delta * delta).abs() < 1e-15);

        assert!(gradient_diversity(&pure, &pair, &full_batches(3, 1)).is_err());
    }

    #[test]
    fn eq4_identity_for_dsgd_step() {
        let (obj, ds) = make_cubic_perturbed(3, 10, 5, 1.0);
        let p = build_topology(TopologyKind::Ring, 5).unwrap();
        let cfg = TrainerConfig {
            eta: 0.05,
            local_batch: 2,
            ..TrainerConfig::default()
        };
        let mut e = WorkerEnsemble::with_offsets(&DVector::from_element(3, 0.2), 5, 0.5, 1);
        for t in 0..10 {
            let out = dsgd_step(&e, &p, &obj, &ds, &cfg, t).unwrap();
            let wa = e.averaged_model();
            let mut mean_at_wa = DVector::zeros(3);
            for b in &out.batches {
                mean_at_wa += batch_gradient(&obj, &wa, &b.indices).unwrap();
            }
            mean_at_wa /= 5.0;
            let div = gradient_diversity(&obj, &e, &out.batches).unwrap();
            let predicted = &wa - (mean_at_wa + div) * 0.05;
            assert!((out.post.averaged_model() - predicted).amax() < 1e-10);
            e = out.post;
        }
    }

    #[test]
    fn sharpness_on_isotropic_quadratic() {
        let obj = iso_quadratic(3);
        let w = DVector::from_vec(vec![0.5, -1.0, 2.0]);
        let xi = DMatrix::from_row_slice(3, 3, &[0.2, 0.05, 0.0, 0.05, 0.1, 0.0, 0.0, 0.0, 0.3]);
        assert_eq!(avg_direction_sharpness(&obj, &w, &DMatrix::zeros(3, 3), 100, &[0], 1).unwrap().mean, 0.0);
        let est = avg_direction_sharpness(&obj, &w, &xi, 4000, &[0], 7).unwrap();
        let expected = 0.5 * xi.trace();
        assert!((est.mean - expected).abs() <= 4.0 * est.stderr, "{} vs {expected}", est.mean);
        let est2 = avg_direction_sharpness(&obj, &w, &(&xi * 2.0), 4000, &[0], 1).unwrap();
        assert!((est2.mean - 2.0 * expected).abs() <= 4.0 * est2.stderr);
        let hca = hessian_consensus_alignment(&obj, &w, &xi, &[0]).unwrap();
        assert!((hca - 2.0 * est.mean).abs() <= 8.0 * est.stderr);
    }

    #[test]
    fn alignment_by_hand() {
        let obj = PolynomialObjective::new(
            vec![PolySample {
                h: DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0])),
                b: DVector::zeros(2),
                c: DVector::zeros(2),
            }],
            0.0,
            0.0,
        );
        let w = DVector::zeros(2);
        assert_eq!(hessian_consensus_alignment(&obj, &w, &DMatrix::identity(2, 2), &[0]).unwrap(), 6.0);
        assert_eq!(hessian_consensus_alignment(&obj, &w, &DMatrix::zeros(2, 2), &[0]).unwrap(), 0.0);
    }

    #[test]
    fn regularizer_cases() {
        assert!((kappa(0.1, 1, 2) - 0.1).abs() < 1e-15);
        assert_eq!(kappa(0.1, 10, 10), 0.0);

        let (obj, _) = make_cubic_perturbed(3, 8, 2, 1.0);
        let w = DVector::from_vec(vec![0.1, 0.4, -0.2]);
        let sgd = implicit_regularizer_sgd(&obj, &w, 0.1, 8).unwrap();
        assert_eq!(sgd.kappa, 0.0);
        assert!((sgd.total - (sgd.base_loss + sgd.gradient_norm)).abs() < 1e-15);

        let zero = implicit_regularizer_dsgd(&obj, &w, &DMatrix::zeros(3, 3), 0.1, 2).unwrap();
        assert_eq!(zero, implicit_regularizer_sgd(&obj, &w, 0.1, 2).unwrap());
        assert!(implicit_regularizer_sgd(&obj, &w, 0.1, 9).is_err());

        // Identical samples: no variance terms.
        let sample = PolySample {
            h: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 3.0])),
            b: DVector::from_vec(vec![0.5, -0.5]),
            c: DVector::zeros(2),
        };
        let same = PolynomialObjective::new(vec![sample; 4], 0.0, 0.0);
        let xi = DMatrix::from_row_slice(2, 2, &[0.2, 0.1, 0.1, 0.3]);
        let w2 = DVector::from_vec(vec![1.0, 2.0]);
        let rep = implicit_regularizer_dsgd(&same, &w2, &xi, 0.1, 2).unwrap();
        assert_eq!(rep.gradient_variance, 0.0);
        assert_eq!(rep.hessian_variance, 0.0);
        assert!((rep.sharpness - hessian_consensus_alignment(&same, &w2, &xi, &[0, 1, 2, 3]).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn smoothing_branches() {
        // Quadratic with Ξ = σ²I: smoothing leaves the gradient unchanged.
        let obj = PolynomialObjective::new(
            vec![PolySample {
                h: DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 0.5])),
                b: DVector::zeros(2),
                c: DVector::zeros(2),
            }],
            0.0,
            0.0,
        );
        let rep = smoothing_report(&obj, &(DMatrix::identity(2, 2) * 0.04), &ProbeRegion::cube(2, 1.0), 200, 64, 3).unwrap();
        assert!((rep.empirical_smoothed_lipschitz - rep.beta).abs() < 1e-9);
        assert!(rep.beta <= 1.5 + 1e-9 && rep.beta > 1.4);
        assert!(rep.theoretical_bound <= rep.beta);
        // β-branch active here: √2·α/σ_min is far larger.
        assert_eq!(rep.theoretical_bound, rep.beta);

        let singular = smoothing_report(&obj, &DMatrix::zeros(2, 2), &ProbeRegion::cube(2, 1.0), 20, 4, 3).unwrap();
        assert!(singular.first_branch.is_infinite());
    }

    #[test]
    fn descent_condition_under_pure_gossip_and_full_mixing() {
        let (obj, ds) = make_cubic_perturbed(3, 6, 1, 1.0);
        let p = build_topology(TopologyKind::Ring, 6).unwrap();
        let cfg = TrainerConfig {
            eta: 0.0,
            ..TrainerConfig::default()
        };
        let mut hist = vec![WorkerEnsemble::with_offsets(&DVector::zeros(3), 6, 0.5, 1)];
        for t in 0..5 {
            let next = dsgd_step(hist.last().unwrap(), &p, &obj, &ds, &cfg, t).unwrap().post;
            hist.push(next);
        }
        let steps = descent_condition_check(&hist, &obj, &ds, &p, &cfg).unwrap();
        assert!(steps.iter().all(|s| s.eligible && s.descended));

        let full = build_topology(TopologyKind::FullyConnected, 6).unwrap();
        let steps = descent_condition_check(&hist[..2], &obj, &ds, &full, &cfg).unwrap();
        assert!(steps[0].trace_after_mixing < 1e-28);
    }

    #[test]
    fn landscape_cases() {
        let obj = PolynomialObjective::new(
            vec![PolySample {
                h: DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.5])),
                b: DVector::zeros(2),
                c: DVector::zeros(2),
            }],
            0.0,
            0.0,
        );
        let center = DVector::from_vec(vec![0.2, -0.1]);
        let s = landscape_slice_along(&obj, &center, &[0], vec![DVector::from_vec(vec![1.0, 0.0])], 1.0, 11).unwrap();
        // L(c + a e1) = L(c) + 3·0.2·a + ½·3·a².
        for (a, v) in s.coords.iter().zip(&s.values) {
            let expected = full_loss(&obj, &center).unwrap() + 0.6 * a + 1.5 * a * a;
            assert!((v - expected).abs() < 1e-12);
        }
        assert!((s.center_value() - full_loss(&obj, &center).unwrap()).abs() < 1e-12);

        let flat = landscape_slice(&obj, &center, &[0], SliceMode::TwoD, 0.0, 5, 1).unwrap();
        assert_eq!(flat.values.len(), 1);
        assert!(landscape_slice(&obj, &center, &[0], SliceMode::OneD, 1.0, 2, 1).is_err());

        let two = landscape_slice(&obj, &center, &[0], SliceMode::TwoD, 0.5, 5, 1).unwrap();
        assert!(two.directions[0].dot(&two.directions[1]).abs() < 1e-12);
        assert_eq!(two.values.len(), 25);
        assert!(two.to_csv().starts_with("x,y,loss\n"));

        let (mlp, ds) = make_mlp(3, 1, DatasetKind::Blobs, 20);
        let w = mlp.initial_point(4);
        let net = landscape_slice(&mlp, &w, ds.all_indices(), SliceMode::OneD, 1.0, 5, 2).unwrap();
        for g in mlp.filter_groups().unwrap() {
            let dn = net.directions[0].rows(g.start, g.len()).norm();
            let wn = w.rows(g.start, g.len()).norm();
            assert!((dn - wn).abs() < 1e-12);
        }
    }
}
