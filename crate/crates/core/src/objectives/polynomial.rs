//! Quadratic and cubic-perturbed per-sample losses with analytic derivatives:
//!
//! `L(w; z) = ½ wᵀH_z w + b_zᵀw + s·Σ_i c_{z,i} w_i³ + q·|w|⁴`

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Dataset, Objective};
use crate::linalg::symmetric_eigen;
use crate::rng::{self, Purpose};

/// Quartic coefficient used by [`make_cubic_perturbed`] to keep the loss
/// bounded below.
pub const QUARTIC_CONFINEMENT: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct PolySample {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Per-coordinate cubic coefficients (unscaled).
    pub c: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialObjective {
    samples: Vec<PolySample>,
    cubic_scale: f64,
    quartic: f64,
    d: usize,
}

impl PolynomialObjective {
    /// # Panics
    /// If `samples` is empty or the samples disagree on dimension.
    pub fn new(samples: Vec<PolySample>, cubic_scale: f64, quartic: f64) -> Self {
        let d = samples.first().expect("at least one sample").b.len();
        assert!(
            samples
                .iter()
                .all(|s| s.h.nrows() == d && s.h.ncols() == d && s.c.len() == d),
            "inconsistent sample dimensions"
        );
        Self {
            samples,
            cubic_scale,
            quartic,
            d,
        }
    }

    /// One-dimensional, single-sample `L(w) = w³`.
    pub fn pure_cubic() -> Self {
        Self::new(
            vec![PolySample {
                h: DMatrix::zeros(1, 1),
                b: DVector::zeros(1),
                c: DVector::from_element(1, 1.0),
            }],
            1.0,
            0.0,
        )
    }

    pub fn samples(&self) -> &[PolySample] {
        &self.samples
    }

    pub fn cubic_scale(&self) -> f64 {
        self.cubic_scale
    }

    pub fn quartic(&self) -> f64 {
        self.quartic
    }

    /// Same samples with a different quartic coefficient.
    pub fn with_quartic(mut self, quartic: f64) -> Self {
        self.quartic = quartic;
        self
    }
}

impl Objective for PolynomialObjective {
    fn dim(&self) -> usize {
        self.d
    }

    fn num_samples(&self) -> usize {
        self.samples.len()
    }

    fn sample_loss(&self, w: &DVector<f64>, sample: usize) -> f64 {
        let s = &self.samples[sample];
        let quad = 0.5 * w.dot(&(&s.h * w)) + s.b.dot(w);
        let cubic: f64 = s.c.iter().zip(w.iter()).map(|(c, x)| c * x * x * x).sum();
        let n2 = w.norm_squared();
        quad + self.cubic_scale * cubic + self.quartic * n2 * n2
    }

    fn sample_gradient(&self, w: &DVector<f64>, sample: usize) -> DVector<f64> {
        let s = &self.samples[sample];
        let mut g = &s.h * w + &s.b;
        for i in 0..self.d {
            g[i] += 3.0 * self.cubic_scale * s.c[i] * w[i] * w[i];
        }
        if self.quartic != 0.0 {
            g += w * (4.0 * self.quartic * w.norm_squared());
        }
        g
    }

    fn sample_hessian(&self, w: &DVector<f64>, sample: usize) -> Option<DMatrix<f64>> {
        let s = &self.samples[sample];
        let mut h = s.h.clone();
        for i in 0..self.d {
            h[(i, i)] += 6.0 * self.cubic_scale * s.c[i] * w[i];
        }
        if self.quartic != 0.0 {
            let n2 = w.norm_squared();
            for i in 0..self.d {
                for j in 0..self.d {
                    let delta = if i == j { n2 } else { 0.0 };
                    h[(i, j)] += 4.0 * self.quartic * (delta + 2.0 * w[i] * w[j]);
                }
            }
        }
        Some(h)
    }

    fn has_analytic_hessian(&self) -> bool {
        true
    }

    fn initial_point(&self, seed: u64) -> DVector<f64> {
        let mut rng = rng::stream(seed, Purpose::Init, usize::MAX >> 24, 0);
        DVector::from_fn(self.d, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal))
    }
}

fn random_samples(d: usize, n: usize, seed: u64) -> Vec<PolySample> {
    let mut rng = rng::stream(seed, Purpose::Dataset, 0, 0);
    (0..n)
        .map(|_| {
            let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut h = a.transpose() * &a;
            h = (&h + h.transpose()) * 0.5;
            let top = symmetric_eigen(&h).map(|e| e.values[0]).unwrap_or(0.0);
            let target: f64 = rng.random_range(0.5..=2.0);
            if top > 0.0 {
                h *= target / top;
            }
            let b = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let c = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            PolySample { h, b, c }
        })
        .collect()
}

/// Random PSD quadratic samples (spectral norm in [0.5, 2]).
///
/// # Panics
/// If `d == 0` or `n == 0`.
pub fn make_quadratic(d: usize, n: usize, seed: u64) -> (PolynomialObjective, Dataset) {
    assert!(d >= 1 && n >= 1, "need d >= 1 and n >= 1");
    (
        PolynomialObjective::new(random_samples(d, n, seed), 0.0, 0.0),
        Dataset::new(n),
    )
}

/// Quadratic samples plus a per-sample cubic term and a fixed quartic
/// confinement of [`QUARTIC_CONFINEMENT`].
///
/// # Panics
/// If `d == 0`, `n == 0`, or `cubic_scale < 0`.
pub fn make_cubic_perturbed(
    d: usize,
    n: usize,
    seed: u64,
    cubic_scale: f64,
) -> (PolynomialObjective, Dataset) {
    assert!(d >= 1 && n >= 1, "need d >= 1 and n >= 1");
    assert!(cubic_scale >= 0.0, "cubic_scale must be nonnegative");
    let quartic = if cubic_scale == 0.0 { 0.0 } else { QUARTIC_CONFINEMENT };
    (
        PolynomialObjective::new(random_samples(d, n, seed), cubic_scale, quartic),
        Dataset::new(n),
    )
}
