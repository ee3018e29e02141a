//! Gaussian-perturbation Monte-Carlo expectations `E_{ε∼N(0,Σ)}[f(ε)]`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::PsdFactor;

/// How standard-normal draws are generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DrawScheme {
    /// Independent draws.
    Plain,
    /// Draws come in `±ξ` pairs; odd-order terms of `f` cancel exactly.
    Antithetic,
    /// Antithetic pairs split into `groups` blocks; within each block the
    /// draws are whitened so their empirical second moment is exactly the
    /// identity. Estimates of `f` polynomial of degree ≤ 3 are then exact.
    /// The standard error comes from the spread of the block means.
    MomentMatched { groups: usize },
}

impl DrawScheme {
    /// Antithetic for even counts, plain otherwise.
    pub fn default_for(k: usize) -> Self {
        if k.is_multiple_of(2) {
            DrawScheme::Antithetic
        } else {
            DrawScheme::Plain
        }
    }
}

/// Mean estimate with componentwise standard error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McVector {
    pub mean: DVector<f64>,
    pub stderr: DVector<f64>,
}

impl McVector {
    pub fn exact(mean: DVector<f64>) -> Self {
        let stderr = DVector::zeros(mean.len());
        Self { mean, stderr }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McScalar {
    pub mean: f64,
    pub stderr: f64,
}

fn standard_normal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

/// Mean and standard error of the mean over equally weighted units.
fn summarize(units: &[DVector<f64>], d: usize) -> McVector {
    let n = units.len() as f64;
    let mut mean = DVector::zeros(d);
    for u in units {
        mean += u;
    }
    mean /= n;
    let stderr = if units.len() < 2 {
        DVector::zeros(d)
    } else {
        let mut var = DVector::zeros(d);
        for u in units {
            let dev = u - &mean;
            var += dev.component_mul(&dev);
        }
        (var / (n - 1.0) / n).map(f64::sqrt)
    };
    McVector { mean, stderr }
}

/// Whitens `xis` in place so that `(1/n) Σ ξ ξᵀ = I` (together with their
/// antithetic partners).
fn whiten(xis: &mut [DVector<f64>]) -> Result<()> {
    let d = xis[0].len();
    let n = xis.len() as f64;
    let mut second = DMatrix::zeros(d, d);
    for x in xis.iter() {
        second += x * x.transpose();
    }
    second /= n;
    let chol = second.cholesky().ok_or_else(|| {
        LabError::InvalidArgument("moment matching needs more draws than dimensions".into())
    })?;
    let l = chol.l();
    for x in xis.iter_mut() {
        *x = l
            .solve_lower_triangular(x)
            .expect("cholesky factor has a positive diagonal");
    }
    Ok(())
}

/// Estimates `E[f(ε)]` for `ε = F ξ`, `ξ ∼ N(0, I)` with `F Fᵀ = Σ`, from
/// `k` evaluations of `f`. Evaluations are averaged in draw order.
pub fn gaussian_expectation<R, F>(
    factor: &PsdFactor,
    k: usize,
    scheme: DrawScheme,
    rng: &mut R,
    mut f: F,
) -> Result<McVector>
where
    R: Rng + ?Sized,
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let d = factor.factor.nrows();
    if k == 0 {
        return Err(LabError::InvalidArgument("need at least one Monte-Carlo draw".into()));
    }
    match scheme {
        DrawScheme::Plain => {
            let mut units = Vec::with_capacity(k);
            for _ in 0..k {
                units.push(f(&factor.apply(&standard_normal(d, rng)))?);
            }
            Ok(summarize(&units, units[0].len()))
        }
        DrawScheme::Antithetic => {
            if !k.is_multiple_of(2) {
                return Err(LabError::InvalidArgument(format!(
                    "antithetic sampling needs an even draw count, got {k}"
                )));
            }
            let mut units = Vec::with_capacity(k / 2);
            for _ in 0..k / 2 {
                let eps = factor.apply(&standard_normal(d, rng));
                let plus = f(&eps)?;
                let minus = f(&(-&eps))?;
                units.push((plus + minus) * 0.5);
            }
            Ok(summarize(&units, units[0].len()))
        }
        DrawScheme::MomentMatched { groups } => {
            if groups == 0 || !k.is_multiple_of(2 * groups) {
                return Err(LabError::InvalidArgument(format!(
                    "moment matching needs {k} divisible by 2 × {groups} groups"
                )));
            }
            let pairs = k / (2 * groups);
            if pairs < d {
                return Err(LabError::InvalidArgument(format!(
                    "moment matching needs at least {d} pairs per group, got {pairs}"
                )));
            }
            let mut units = Vec::with_capacity(groups);
            for _ in 0..groups {
                let mut xis: Vec<DVector<f64>> = (0..pairs).map(|_| standard_normal(d, rng)).collect();
                whiten(&mut xis)?;
                let mut acc: Option<DVector<f64>> = None;
                for xi in &xis {
                    let eps = factor.apply(xi);
                    let pair = f(&eps)? + f(&(-&eps))?;
                    acc = Some(match acc {
                        Some(a) => a + pair,
                        None => pair,
                    });
                }
                units.push(acc.expect("pairs >= 1") / (2 * pairs) as f64);
            }
            Ok(summarize(&units, units[0].len()))
        }
    }
}

/// Scalar convenience wrapper over [`gaussian_expectation`].
pub fn gaussian_expectation_scalar<R, F>(
    factor: &PsdFactor,
    k: usize,
    scheme: DrawScheme,
    rng: &mut R,
    mut f: F,
) -> Result<McScalar>
where
    R: Rng + ?Sized,
    F: FnMut(&DVector<f64>) -> Result<f64>,
{
    let est = gaussian_expectation(factor, k, scheme, rng, |e| Ok(DVector::from_element(1, f(e)?)))?;
    Ok(McScalar {
        mean: est.mean[0],
        stderr: est.stderr[0],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Purpose};

    fn factor(diag: &[f64]) -> PsdFactor {
        PsdFactor::new(&DMatrix::from_diagonal(&DVector::from_vec(diag.to_vec()))).unwrap()
    }

    #[test]
    fn antithetic_cancels_odd_functions() {
        let f = factor(&[0.3, 2.0]);
        let mut r = rng::stream(1, Purpose::Probe, 0, 0);
        let est = gaussian_expectation(&f, 100, DrawScheme::Antithetic, &mut r, |e| {
            Ok(DVector::from_vec(vec![e[0] * e[0] * e[0] + 2.0 * e[1], 1.0]))
        })
        .unwrap();
        assert_eq!(est.mean[0], 0.0);
        assert!((est.mean[1] - 1.0).abs() < 1e-15);
        assert!(gaussian_expectation(&f, 3, DrawScheme::Antithetic, &mut r, |e| Ok(e.clone())).is_err());
    }

    #[test]
    fn moment_matching_is_exact_for_quadratics() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
        let f = PsdFactor::new(&cov).unwrap();
        let mut r = rng::stream(2, Purpose::Probe, 0, 0);
        let est = gaussian_expectation(&f, 80, DrawScheme::MomentMatched { groups: 4 }, &mut r, |e| {
            Ok(DVector::from_vec(vec![e[0] * e[0], e[0] * e[1], e[1] * e[1]]))
        })
        .unwrap();
        assert!((est.mean[0] - 1.0).abs() < 1e-12);
        assert!((est.mean[1] - 0.3).abs() < 1e-12);
        assert!((est.mean[2] - 0.5).abs() < 1e-12);
        assert!(est.stderr.amax() < 1e-12);
    }

    #[test]
    fn plain_second_moment_within_error() {
        let f = factor(&[4.0]);
        let mut r = rng::stream(3, Purpose::Probe, 0, 0);
        let est = gaussian_expectation_scalar(&f, 20_000, DrawScheme::Plain, &mut r, |e| Ok(e[0] * e[0])).unwrap();
        assert!((est.mean - 4.0).abs() < 4.0 * est.stderr);
        assert!(est.stderr > 0.0);
    }
}
