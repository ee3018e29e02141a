//! Small dense linear-algebra helpers: a cyclic Jacobi eigensolver for
//! symmetric matrices and the PSD utilities built on it.

use nalgebra::{DMatrix, DVector};

use crate::error::{LabError, Result};

/// Eigenvalues below this are treated as numerical noise and clamped to zero.
pub const PSD_CLAMP: f64 = 1e-10;
/// Eigenvalues below this mark a matrix as genuinely indefinite.
pub const PSD_REJECT: f64 = -1e-6;

/// Eigen-decomposition of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: DMatrix<f64>,
    pub sweeps: usize,
}

/// Largest |a_ij - a_ji| over the matrix.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

fn off_diagonal_norm(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi rotations. Converges when the off-diagonal Frobenius norm
/// drops below `1e-13 * max(1, |A|_F)`, which bounds every eigenvalue error
/// well inside 1e-10 for the matrix sizes used here. The sweep cap is `100 * n`.
pub fn symmetric_eigen(a: &DMatrix<f64>) -> Result<SymmetricEigen> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LabError::DimensionMismatch {
            expected: n,
            actual: a.ncols(),
            context: "eigensolver needs a square matrix",
        });
    }
    // Work on the symmetric part so tiny asymmetries cannot stall convergence.
    let mut m = (a + a.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    let tol = 1e-13 * m.norm().max(1.0);
    let max_sweeps = 100 * n.max(1);
    let mut sweeps = 0;

    while off_diagonal_norm(&m) > tol {
        if sweeps >= max_sweeps {
            return Err(LabError::NoConvergence {
                sweeps,
                off: off_diagonal_norm(&m),
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymmetricEigen {
        values,
        vectors,
        sweeps,
    })
}

/// A factor `F` with `F Fᵀ = Sigma`, built as `U sqrt(Λ)` from the
/// eigen-decomposition. Small negative eigenvalues are clamped to zero.
#[derive(Debug, Clone)]
pub struct PsdFactor {
    pub factor: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

impl PsdFactor {
    pub fn new(sigma: &DMatrix<f64>) -> Result<Self> {
        let asym = asymmetry(sigma);
        if asym > 1e-9 * sigma.amax().max(1.0) {
            return Err(LabError::NotSymmetric(asym));
        }
        let eig = symmetric_eigen(sigma)?;
        let smallest = eig.values.last().copied().unwrap_or(0.0);
        if smallest < PSD_REJECT {
            return Err(LabError::NotPsd(smallest));
        }
        let eigenvalues: Vec<f64> = eig
            .values
            .iter()
            .map(|&l| if l < PSD_CLAMP { 0.0 } else { l })
            .collect();
        let d = sigma.nrows();
        let factor = DMatrix::from_fn(d, d, |r, c| eig.vectors[(r, c)] * eigenvalues[c].sqrt());
        Ok(Self {
            factor,
            eigenvalues,
        })
    }

    /// True when every clamped eigenvalue is zero.
    pub fn is_zero(&self) -> bool {
        self.eigenvalues.iter().all(|&l| l == 0.0)
    }

    pub fn smallest_eigenvalue(&self) -> f64 {
        self.eigenvalues.last().copied().unwrap_or(0.0)
    }

    pub fn apply(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.factor * xi
    }
}

/// `sum_{l,s} A_ls B_ls`, i.e. `Tr(A Bᵀ)`; equals `Tr(A B)` for symmetric `B`.
pub fn frobenius_inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
