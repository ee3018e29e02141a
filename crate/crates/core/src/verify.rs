//! Built-in verification suites at desk-scale settings. Each check returns
//! a [`CriterionReport`] carrying its raw measurements.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diagnostics::{
    descent_condition_check, gradient_diversity, implicit_regularizer_dsgd, mean_cubed_deviation, smoothing_report,
    weight_diversity_matrix, ProbeRegion,
};
use crate::engine::{SamplingMode, TrainerConfig, WorkerEnsemble};
use crate::equivalence::{
    compare_directions, minibatch_variance_identity_check, residual_scaling_fit, sharpness_preference_comparison,
    ComparisonSettings, PreferenceSetup,
};
use crate::error::{LabError, Result};
use crate::linalg::PsdFactor;
use crate::montecarlo::{gaussian_expectation_scalar, DrawScheme};
use crate::objectives::{
    make_cubic_perturbed, make_mlp, make_quadratic, third_order_contract, Batch, DatasetKind,
    HuberKink, Objective, PolynomialObjective,
};
use crate::rng::{self, Purpose};
use crate::runner::dsgd_history;
use crate::topology::{build_topology, shuffle_workers, spectral_report, TopologyKind};
use crate::objectives::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionReport {
    /// Position in the acceptance list.
    pub index: u8,
    pub name: String,
    pub passed: bool,
    /// Soft checks are reported but never fail a suite.
    pub hard: bool,
    pub seconds: f64,
    pub details: Value,
}

impl CriterionReport {
    pub fn summary_line(&self) -> String {
        let status = match (self.passed, self.hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "SOFT-FAIL",
        };
        format!("[{status}] #{:02} {} ({:.2}s)", self.index, self.name, self.seconds)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Theorem1,
    LemmaC2,
    Smoothing,
    Props,
    Flatness,
    All,
}

impl Suite {
    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Theorem1 => "theorem1",
            Suite::LemmaC2 => "lemma_c2",
            Suite::Smoothing => "smoothing",
            Suite::Props => "props",
            Suite::Flatness => "flatness",
            Suite::All => "all",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "theorem1" => Suite::Theorem1,
            "lemma_c2" => Suite::LemmaC2,
            "smoothing" => Suite::Smoothing,
            "props" => Suite::Props,
            "flatness" => Suite::Flatness,
            "all" => Suite::All,
            other => {
                return Err(LabError::InvalidArgument(format!(
                    "unknown suite `{other}` (theorem1, lemma_c2, smoothing, props, flatness, all)"
                )))
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: Suite,
    pub seed: u64,
    /// Every hard criterion passed.
    pub passed: bool,
    pub criteria: Vec<CriterionReport>,
}

type Check = fn(u64) -> Result<(bool, Value)>;

fn checks(suite: Suite) -> Vec<(u8, &'static str, bool, Check)> {
    let theorem1: Vec<(u8, &'static str, bool, Check)> = vec![
        (2, "pure_cubic_closed_form_directions", true, closed_form_directions),
        (3, "residual_cubic_order", true, residual_order),
        (4, "diversity_taylor_chain", true, taylor_chain),
    ];
    let lemma: Vec<(u8, &'static str, bool, Check)> = vec![
        (5, "minibatch_variance_identity", true, variance_identity),
        (6, "batch_independent_sharpness_terms", true, batch_independent_sharpness),
    ];
    let smoothing: Vec<(u8, &'static str, bool, Check)> = vec![
        (7, "smoothed_gradient_lipschitz_bound", true, smoothing_bound),
        (10, "third_moment_order", true, third_moment_order),
    ];
    let props: Vec<(u8, &'static str, bool, Check)> = vec![
        (1, "quadratic_zero_gradient_diversity", true, zero_diversity),
        (8, "consensus_descent_condition", true, descent_condition),
        (9, "spectral_gaps", true, spectral_gaps),
    ];
    let flatness: Vec<(u8, &'static str, bool, Check)> = vec![(11, "dsgd_flatness_preference", false, flatness_preference)];
    let mut all = match suite {
        Suite::Theorem1 => theorem1,
        Suite::LemmaC2 => lemma,
        Suite::Smoothing => smoothing,
        Suite::Props => props,
        Suite::Flatness => flatness,
        Suite::All => [theorem1, lemma, smoothing, props, flatness].concat(),
    };
    all.sort_by_key(|c| c.0);
    all
}

/// Runs one suite. Errors inside a check are reported as a failed check.
pub fn run_suite(suite: Suite, seed: u64) -> VerifyReport {
    let criteria: Vec<CriterionReport> = checks(suite)
        .into_iter()
        .map(|(index, name, hard, check)| {
            let started = Instant::now();
            let (passed, details) = match check(seed) {
                Ok(r) => r,
                Err(e) => (false, json!({ "error": e.to_string() })),
            };
            CriterionReport {
                index,
                name: name.to_string(),
                passed,
                hard,
                seconds: started.elapsed().as_secs_f64(),
                details,
            }
        })
        .collect();
    VerifyReport {
        suite,
        seed,
        passed: criteria.iter().all(|c| c.passed || !c.hard),
        criteria,
    }
}

/// Runs the single check with acceptance index `index`.
pub fn run_criterion(index: u8, seed: u64) -> Option<CriterionReport> {
    let mut report = run_suite_filtered(index, seed)?;
    Some(report.remove(0))
}

fn run_suite_filtered(index: u8, seed: u64) -> Option<Vec<CriterionReport>> {
    let (index, name, hard, check) = checks(Suite::All).into_iter().find(|c| c.0 == index)?;
    let started = Instant::now();
    let (passed, details) = match check(seed) {
        Ok(r) => r,
        Err(e) => (false, json!({ "error": e.to_string() })),
    };
    Some(vec![CriterionReport {
        index,
        name: name.to_string(),
        passed,
        hard,
        seconds: started.elapsed().as_secs_f64(),
        details,
    }])
}

fn sub_seed(seed: u64, i: usize) -> u64 {
    rng::stream(seed, Purpose::Trial, i, 0).next_u64()
}

fn full_batch_config(eta: f64) -> TrainerConfig {
    TrainerConfig {
        eta,
        sampling: SamplingMode::FullBatch,
        ..TrainerConfig::default()
    }
}

fn full_batches(m: usize, ds: &Dataset) -> Vec<Batch> {
    (0..m).map(|j| Batch::new(j, ds.all_indices().to_vec())).collect()
}

/// Gradient diversity on quadratics with shared batches, 20 ensembles.
pub fn zero_diversity(seed: u64) -> Result<(bool, Value)> {
    let (d, m) = (10, 8);
    let (obj, ds) = make_quadratic(d, 16, seed);
    let mut worst = 0.0f64;
    for i in 0..20 {
        let s = sub_seed(seed, i);
        let center = obj.initial_point(s) * 4.0;
        let e = WorkerEnsemble::with_offsets(&center, m, 1.0, s);
        // Full batches, and one shared random mini-batch.
        let mut r = rng::stream(s, Purpose::Batch, 0, 0);
        let shared: Vec<usize> = (0..4).map(|_| r.random_range(0..ds.len())).collect();
        let minis: Vec<Batch> = (0..m).map(|j| Batch::new(j, shared.clone())).collect();
        for batches in [full_batches(m, &ds), minis] {
            worst = worst.max(gradient_diversity(&obj, &e, &batches)?.amax());
        }
    }
    Ok((worst <= 1e-10, json!({ "max_abs_gradient_diversity": worst, "tolerance": 1e-10 })))
}

/// Both directions equal `3δ²` on the pure cubic with two workers at `±δ`.
pub fn closed_form_directions(seed: u64) -> Result<(bool, Value)> {
    let obj = PolynomialObjective::pure_cubic();
    let ds = Dataset::new(1);
    let p = build_topology(TopologyKind::FullyConnected, 2)?;
    let settings = ComparisonSettings {
        trials: 2,
        draws: 10_000,
        scheme: DrawScheme::Antithetic,
        seed,
    };
    let mut ok = true;
    let mut rows = Vec::new();
    for delta in [0.05, 0.1, 0.2] {
        let e = WorkerEnsemble::from_vectors(&[DVector::from_element(1, delta), DVector::from_element(1, -delta)]);
        let cmp = compare_directions(&obj, &e, &p, &ds, &full_batch_config(0.1), &settings, 1.0)?;
        let exact = 3.0 * delta * delta;
        let combined = cmp.dsgd_stderr[0].hypot(cmp.adsam_stderr[0]);
        let tol = 3.0 * combined + 1e-15;
        let pass = (cmp.dsgd_expected_direction[0] - exact).abs() <= tol && (cmp.adsam_direction[0] - exact).abs() <= tol;
        ok &= pass;
        rows.push(json!({
            "delta": delta,
            "exact": exact,
            "dsgd": cmp.dsgd_expected_direction[0],
            "adsam": cmp.adsam_direction[0],
            "combined_stderr": combined,
            "passed": pass,
        }));
    }
    Ok((ok, json!({ "draws": 10_000, "points": rows })))
}

/// Log-log slope of the D-SGD / average-direction residual.
pub fn residual_order(seed: u64) -> Result<(bool, Value)> {
    let (obj, ds) = make_cubic_perturbed(5, 16, seed, 1.0);
    let p = build_topology(TopologyKind::Ring, 8)?;
    let base = WorkerEnsemble::with_offsets(&obj.initial_point(seed), 8, 0.5, seed);
    let settings = ComparisonSettings {
        trials: 2,
        draws: 2000,
        scheme: DrawScheme::MomentMatched { groups: 10 },
        seed,
    };
    let fit = residual_scaling_fit(&obj, &base, &p, &ds, &full_batch_config(0.1), &[1.0, 0.5, 0.25, 0.125], &settings)?;
    let ok = matches!((fit.slope, fit.slope_stderr), (Some(s), Some(se)) if (2.5..=3.5).contains(&s) && se <= 0.3);
    Ok((ok, serde_json::to_value(&fit).expect("fit serializes")))
}

/// `|gradient_diversity − ½ T[Ξ]| / mean|w_j − w_a|³` stays within a
/// factor of two across displacement scales.
pub fn taylor_chain(seed: u64) -> Result<(bool, Value)> {
    let (obj, ds) = make_cubic_perturbed(5, 16, seed, 1.0);
    let m = 8;
    let base = WorkerEnsemble::with_offsets(&obj.initial_point(seed), m, 0.5, seed);
    let batches = full_batches(m, &ds);
    let mut ratios = Vec::new();
    let mut rows = Vec::new();
    for c in [1.0, 0.5, 0.25] {
        let e = base.scaled_about_mean(c);
        let xi = weight_diversity_matrix(&e)?;
        let diversity = gradient_diversity(&obj, &e, &batches)?;
        let predicted = third_order_contract(&obj, &e.averaged_model(), ds.all_indices(), &xi)? * 0.5;
        let remainder = (&diversity - &predicted).norm();
        let cubed = mean_cubed_deviation(&e);
        ratios.push(remainder / cubed);
        rows.push(json!({
            "scale": c,
            "remainder": remainder,
            "mean_cubed_deviation": cubed,
            "diversity_norm": diversity.norm(),
            "ratio": remainder / cubed,
        }));
    }
    let c_fit = ratios.iter().cloned().fold(0.0, f64::max);
    let c_min = ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    let ok = c_fit.is_finite() && c_fit > 0.0 && c_min >= c_fit / 2.0;
    Ok((ok, json!({ "fitted_constant": c_fit, "smallest_ratio": c_min, "points": rows })))
}

/// Exhaustive partition average vs the closed form.
pub fn variance_identity(seed: u64) -> Result<(bool, Value)> {
    let mut r = rng::stream(seed, Purpose::Dataset, 0, 0);
    let mut worst = 0.0f64;
    let mut rows = Vec::new();
    for (n, b) in [(4, 2), (6, 2), (6, 3), (8, 2), (8, 4)] {
        for _ in 0..5 {
            let v: Vec<DVector<f64>> = (0..n)
                .map(|_| DVector::from_fn(3, |_, _| r.sample::<f64, _>(StandardNormal)))
                .collect();
            let res = minibatch_variance_identity_check(&v, b)?;
            worst = worst.max(res.relative_error);
            rows.push(serde_json::to_value(res).expect("serializes"));
        }
    }
    Ok((worst <= 1e-10, json!({ "max_relative_error": worst, "checks": rows })))
}

/// `κ = 0` at `B = N`; the sharpness terms do not depend on `B`.
pub fn batch_independent_sharpness(seed: u64) -> Result<(bool, Value)> {
    let n = 16;
    let (obj, _) = make_cubic_perturbed(4, n, seed, 1.0);
    let e = WorkerEnsemble::with_offsets(&obj.initial_point(seed), 6, 0.3, seed);
    let xi = weight_diversity_matrix(&e)?;
    let w = e.averaged_model();
    let eta = 0.1;
    let reports = [n / 4, n / 2, n]
        .iter()
        .map(|&b| implicit_regularizer_dsgd(&obj, &w, &xi, eta, b))
        .collect::<Result<Vec<_>>>()?;
    let spread = |f: &dyn Fn(&crate::diagnostics::RegularizerReport) -> f64| {
        let vals: Vec<f64> = reports.iter().map(f).collect();
        vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min)
    };
    let sharp_spread = spread(&|r| r.sharpness);
    let quad_spread = spread(&|r| r.sharpness_quadratic);
    let kappa_full = reports[2].kappa;
    let ok = kappa_full == 0.0 && sharp_spread <= 1e-12 && quad_spread <= 1e-12 && reports[0].kappa > reports[1].kappa;
    Ok((
        ok,
        json!({
            "kappa_at_full_batch": kappa_full,
            "sharpness_spread": sharp_spread,
            "sharpness_quadratic_spread": quad_spread,
            "reports": reports,
        }),
    ))
}

/// On a narrow Huber kink with `σ² = 0.25`, the `√2α/σ_min` branch is the
/// active bound and the smoothed gradient respects it.
pub fn smoothing_bound(seed: u64) -> Result<(bool, Value)> {
    let obj = HuberKink::new(0.01);
    let xi = DMatrix::from_element(1, 1, 0.25);
    let rep = smoothing_report(&obj, &xi, &ProbeRegion::cube(1, 1.0), 200, 100_000, seed)?;
    let branch_active = rep.first_branch < rep.beta;
    let ok = branch_active && rep.empirical_smoothed_lipschitz <= 1.05 * rep.theoretical_bound;
    Ok((ok, serde_json::to_value(&rep).expect("serializes")))
}

fn random_psd(d: usize, rank: usize, r: &mut impl Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, rank, |_, _| r.sample::<f64, _>(StandardNormal));
    let s = &a * a.transpose() / rank as f64;
    (&s + s.transpose()) * 0.5
}

/// `E|ε|³ / (Tr Ξ)^{3/2} ∈ [1, 3]` for random covariances.
pub fn third_moment_order(seed: u64) -> Result<(bool, Value)> {
    let mut r = rng::stream(seed, Purpose::Dataset, 1, 0);
    let mut rows = Vec::new();
    let mut ok = true;
    for i in 0..10 {
        let d = r.random_range(1..=10);
        let rank = r.random_range(1..=d);
        let xi = random_psd(d, rank, &mut r);
        let factor = PsdFactor::new(&xi)?;
        let mut draws = rng::stream(seed, Purpose::Smoothing, i, 0);
        let est = gaussian_expectation_scalar(&factor, 100_000, DrawScheme::Antithetic, &mut draws, |e| Ok(e.norm().powi(3)))?;
        let ratio = est.mean / xi.trace().powf(1.5);
        let pass = (1.0..=3.0).contains(&ratio);
        ok &= pass;
        rows.push(json!({ "d": d, "rank": rank, "trace": xi.trace(), "ratio": ratio, "stderr": est.stderr / xi.trace().powf(1.5) }));
    }
    Ok((ok, json!({ "draws": 100_000, "covariances": rows })))
}

/// Every step with `η ≤ η*(t)` shrinks the consensus distance.
pub fn descent_condition(seed: u64) -> Result<(bool, Value)> {
    let (obj, ds) = make_cubic_perturbed(5, 32, seed, 1.0);
    let p = build_topology(TopologyKind::Ring, 8)?;
    let cfg = TrainerConfig {
        eta: 0.005,
        steps: 200,
        local_batch: 4,
        seed,
        ..TrainerConfig::default()
    };
    let start = WorkerEnsemble::with_offsets(&obj.initial_point(seed), 8, 1.0, seed);
    let hist = dsgd_history(&obj, &ds, &p, &cfg, start)?;
    let steps = descent_condition_check(&hist, &obj, &ds, &p, &cfg)?;
    let eligible: Vec<_> = steps.iter().filter(|s| s.eligible).collect();
    let violations: Vec<usize> = steps.iter().filter(|s| s.is_violation()).map(|s| s.step).collect();
    let grew = steps.iter().filter(|s| !s.descended).count();
    let ok = violations.is_empty() && !eligible.is_empty();
    Ok((
        ok,
        json!({
            "steps": steps.len(),
            "eligible_steps": eligible.len(),
            "violations": violations,
            "steps_with_growth": grew,
            "eta": cfg.eta,
            "eligible_detail": eligible,
        }),
    ))
}

/// Closed-form spectral gaps and shuffle invariance.
pub fn spectral_gaps(seed: u64) -> Result<(bool, Value)> {
    let ring4 = spectral_report(&build_topology(TopologyKind::Ring, 4)?)?.spectral_gap;
    let ring16 = spectral_report(&build_topology(TopologyKind::Ring, 16)?)?.spectral_gap;
    let ring16_exact = 1.0 - (1.0 + 2.0 * (std::f64::consts::PI / 8.0).cos()) / 3.0;
    let full: Vec<f64> = [2, 5, 8]
        .iter()
        .map(|&m| Ok(spectral_report(&build_topology(TopologyKind::FullyConnected, m)?)?.spectral_gap))
        .collect::<Result<_>>()?;
    let ring = build_topology(TopologyKind::Ring, 12)?;
    let plain = spectral_report(&ring)?.eigenvalues;
    let shuffled = spectral_report(&shuffle_workers(&ring, seed))?.eigenvalues;
    let shuffle_gap = plain.iter().zip(&shuffled).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let ok = (ring4 - 2.0 / 3.0).abs() <= 1e-8
        && (ring16 - ring16_exact).abs() <= 1e-6
        && full.iter().all(|&g| g == 1.0)
        && shuffle_gap <= 1e-10;
    Ok((
        ok,
        json!({
            "ring4": ring4,
            "ring16": ring16,
            "ring16_expected": ring16_exact,
            "fully_connected": full,
            "shuffle_max_eigenvalue_difference": shuffle_gap,
        }),
    ))
}

/// Paired MLP runs: D-SGD on a ring vs C-SGD stopped at the same training
/// loss, plus ring vs fully-connected steady-state consensus distance.
pub fn flatness_preference(seed: u64) -> Result<(bool, Value)> {
    let m = 16;
    let ring = build_topology(TopologyKind::Ring, m)?;
    let mut wins = 0;
    let mut rows = Vec::new();
    for i in 0..10 {
        let s = sub_seed(seed, i);
        let (obj, ds) = make_mlp(FLATNESS_HIDDEN, s, DatasetKind::TwoMoons, FLATNESS_POINTS);
        let setup = PreferenceSetup {
            trainer: TrainerConfig {
                eta: FLATNESS_ETA,
                local_batch: FLATNESS_LOCAL_BATCH,
                steps: 20_000,
                seed: s,
                ..TrainerConfig::default()
            },
            init: obj.initial_point(s),
            loss_threshold: FLATNESS_LOSS,
            check_every: 10,
            probe_sigma2: 0.01,
            probe_draws: 64,
            landscape: None,
        };
        let rep = sharpness_preference_comparison(&obj, &ds, &ring, &setup)?;
        wins += usize::from(rep.dsgd_flatter());
        rows.push(json!({
            "seed": s,
            "dsgd_lambda_max": rep.dsgd.lambda_max,
            "csgd_lambda_max": rep.csgd.lambda_max,
            "dsgd_steps": rep.dsgd.steps,
            "csgd_steps": rep.csgd.steps,
            "dsgd_sharpness": rep.dsgd.sharpness,
            "csgd_sharpness": rep.csgd.sharpness,
        }));
    }
    let (ring_larger, pairs) = steady_state_pairs(seed)?;
    let ok = wins >= 7 && ring_larger == 10;
    Ok((
        ok,
        json!({
            "dsgd_flatter_seeds": wins,
            "runs": rows,
            "ring_larger_consensus_distance": ring_larger,
            "consensus_pairs": pairs,
        }),
    ))
}

const FLATNESS_HIDDEN: usize = 8;
const FLATNESS_POINTS: usize = 512;
const FLATNESS_ETA: f64 = 0.5;
const FLATNESS_LOCAL_BATCH: usize = 16;
const FLATNESS_LOSS: f64 = 0.25;

fn steady_state_pairs(seed: u64) -> Result<(usize, Vec<Value>)> {
    let mut larger = 0;
    let mut rows = Vec::new();
    for i in 0..10 {
        let s = sub_seed(seed, i);
        let (obj, ds) = make_mlp(FLATNESS_HIDDEN, s, DatasetKind::TwoMoons, FLATNESS_POINTS);
        let cfg = TrainerConfig {
            eta: FLATNESS_ETA,
            steps: 300,
            local_batch: FLATNESS_LOCAL_BATCH,
            seed: s,
            ..TrainerConfig::default()
        };
        let start = WorkerEnsemble::replicated(&obj.initial_point(s), 16);
        let mut means = [0.0; 2];
        for (k, kind) in [TopologyKind::Ring, TopologyKind::FullyConnected].into_iter().enumerate() {
            let p = build_topology(kind, 16)?;
            let hist = dsgd_history(&obj, &ds, &p, &cfg, start.clone())?;
            let tail = &hist[cfg.steps / 2..];
            means[k] = tail.iter().map(crate::diagnostics::consensus_distance).sum::<f64>() / tail.len() as f64;
        }
        larger += usize::from(means[0] > means[1]);
        rows.push(json!({ "seed": s, "ring": means[0], "fully_connected": means[1] }));
    }
    Ok((larger, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_round_trip() {
        for s in [Suite::Theorem1, Suite::LemmaC2, Suite::Smoothing, Suite::Props, Suite::Flatness, Suite::All] {
            assert_eq!(s.as_str().parse::<Suite>().unwrap(), s);
        }
        assert!("theorem2".parse::<Suite>().is_err());
    }

    #[test]
    fn suites_partition_the_checks() {
        let mut seen: Vec<u8> = [Suite::Theorem1, Suite::LemmaC2, Suite::Smoothing, Suite::Props, Suite::Flatness]
            .iter()
            .flat_map(|&s| checks(s).into_iter().map(|c| c.0))
            .collect();
        seen.sort();
        assert_eq!(seen, (1..=11).collect::<Vec<u8>>());
        assert_eq!(checks(Suite::All).len(), 11);
    }

    #[test]
    fn props_suite_passes() {
        let r = run_suite(Suite::Props, 3);
        assert!(r.passed, "{r:?}");
        assert_eq!(r.criteria.len(), 3);
    }
}
