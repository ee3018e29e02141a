//! Per-sample differentiable objectives, datasets, and the batch-level
//! derivative evaluators built on top of them.

mod kink;
mod mlp;
mod polynomial;

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::asymmetry;
use crate::rng::{self, Purpose};

pub use kink::HuberKink;
pub use mlp::{generate_points, make_mlp, DatasetKind, LabeledPoint, Mlp};
pub use polynomial::{make_cubic_perturbed, make_quadratic, PolySample, PolynomialObjective, QUARTIC_CONFINEMENT};

/// Dense Hessians are never materialized above this dimension.
pub const MAX_DENSE_DIM: usize = 200;

/// A loss `L(w; z_i)` over a fixed, indexed collection of samples.
///
/// Samples are addressed by index; the per-sample payload lives inside the
/// implementation. Evaluators must be pure.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    fn num_samples(&self) -> usize;

    fn sample_loss(&self, w: &DVector<f64>, sample: usize) -> f64;

    fn sample_gradient(&self, w: &DVector<f64>, sample: usize) -> DVector<f64>;

    /// Analytic per-sample Hessian, when the family has one.
    fn sample_hessian(&self, _w: &DVector<f64>, _sample: usize) -> Option<DMatrix<f64>> {
        None
    }

    fn has_analytic_hessian(&self) -> bool {
        false
    }

    /// Parameter blocks treated as one filter by landscape filter
    /// normalization. `None` means the parameters are not a network.
    fn filter_groups(&self) -> Option<Vec<Range<usize>>> {
        None
    }

    /// Seeded starting point for training runs.
    fn initial_point(&self, seed: u64) -> DVector<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sharding {
    /// Every worker sees the whole dataset (homogeneous i.i.d. data).
    #[default]
    Replicated,
    /// A seeded uniform partition of the samples across workers.
    Partition,
}

/// Sample index space plus the worker → shard map.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    all: Vec<usize>,
    shards: Option<Vec<Vec<usize>>>,
}

impl Dataset {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            all: (0..n).collect(),
            shards: None,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn all_indices(&self) -> &[usize] {
        &self.all
    }

    /// Assigns shards for `m` workers.
    pub fn with_sharding(mut self, m: usize, sharding: Sharding, seed: u64) -> Result<Self> {
        match sharding {
            Sharding::Replicated => self.shards = None,
            Sharding::Partition => {
                if self.n < m {
                    return Err(LabError::InvalidArgument(format!(
                        "cannot partition {} samples across {m} workers",
                        self.n
                    )));
                }
                let mut perm = self.all.clone();
                perm.shuffle(&mut rng::stream(seed, Purpose::Dataset, 0, 1));
                let base = self.n / m;
                let extra = self.n % m;
                let mut shards = Vec::with_capacity(m);
                let mut start = 0;
                for j in 0..m {
                    let len = base + usize::from(j < extra);
                    let mut shard = perm[start..start + len].to_vec();
                    shard.sort_unstable();
                    shards.push(shard);
                    start += len;
                }
                self.shards = Some(shards);
            }
        }
        Ok(self)
    }

    pub fn shard(&self, worker: usize) -> &[usize] {
        match &self.shards {
            Some(shards) => &shards[worker % shards.len()],
            None => &self.all,
        }
    }

    pub fn is_partitioned(&self) -> bool {
        self.shards.is_some()
    }
}

/// The mini-batch one worker uses at one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub worker: usize,
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn new(worker: usize, indices: Vec<usize>) -> Self {
        Self { worker, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check_indices<O: Objective + ?Sized>(obj: &O, indices: &[usize]) -> Result<()> {
    if indices.is_empty() {
        return Err(LabError::EmptyBatch);
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= obj.num_samples()) {
        return Err(LabError::InvalidArgument(format!(
            "sample index {bad} out of range 0..{}",
            obj.num_samples()
        )));
    }
    Ok(())
}

fn check_dim<O: Objective + ?Sized>(obj: &O, w: &DVector<f64>) -> Result<()> {
    if w.len() != obj.dim() {
        return Err(LabError::DimensionMismatch {
            expected: obj.dim(),
            actual: w.len(),
            context: "parameter vector",
        });
    }
    Ok(())
}

fn dense_guard(d: usize) -> Result<()> {
    if d > MAX_DENSE_DIM {
        return Err(LabError::DimensionGuard {
            d,
            limit: MAX_DENSE_DIM,
        });
    }
    Ok(())
}

/// Mean loss over `indices`, summed in index order.
pub fn batch_loss<O: Objective + ?Sized>(obj: &O, w: &DVector<f64>, indices: &[usize]) -> Result<f64> {
    check_dim(obj, w)?;
    check_indices(obj, indices)?;
    let sum: f64 = indices.iter().map(|&i| obj.sample_loss(w, i)).sum();
    Ok(sum / indices.len() as f64)
}

/// Mean per-sample gradient over `indices`, summed in index order.
pub fn batch_gradient<O: Objective + ?Sized>(
    obj: &O,
    w: &DVector<f64>,
    indices: &[usize],
) -> Result<DVector<f64>> {
    check_dim(obj, w)?;
    check_indices(obj, indices)?;
    let mut acc = DVector::zeros(obj.dim());
    for &i in indices {
        acc += obj.sample_gradient(w, i);
    }
    Ok(acc / indices.len() as f64)
}

/// Full-dataset loss `L^μ(w)`.
pub fn full_loss<O: Objective + ?Sized>(obj: &O, w: &DVector<f64>) -> Result<f64> {
    let all: Vec<usize> = (0..obj.num_samples()).collect();
    batch_loss(obj, w, &all)
}

/// Full-dataset gradient `∇L^μ(w)`.
pub fn full_gradient<O: Objective + ?Sized>(obj: &O, w: &DVector<f64>) -> Result<DVector<f64>> {
    let all: Vec<usize> = (0..obj.num_samples()).collect();
    batch_gradient(obj, w, &all)
}

/// Mean Hessian over `indices`: analytic when the objective provides one,
/// otherwise central differences of the batch gradient.
pub fn batch_hessian<O: Objective + ?Sized>(
    obj: &O,
    w: &DVector<f64>,
    indices: &[usize],
) -> Result<DMatrix<f64>> {
    dense_guard(obj.dim())?;
    check_dim(obj, w)?;
    check_indices(obj, indices)?;
    if obj.has_analytic_hessian() {
        let d = obj.dim();
        let mut acc = DMatrix::zeros(d, d);
        for &i in indices {
            match obj.sample_hessian(w, i) {
                Some(h) => acc += h,
                None => return batch_hessian_fd(obj, w, indices),
            }
        }
        Ok(acc / indices.len() as f64)
    } else {
        batch_hessian_fd(obj, w, indices)
    }
}

/// Finite-difference Hessian: step `1e-4 * (1 + |w|_inf)`, symmetrized.
pub fn batch_hessian_fd<O: Objective + ?Sized>(
    obj: &O,
    w: &DVector<f64>,
    indices: &[usize],
) -> Result<DMatrix<f64>> {
    dense_guard(obj.dim())?;
    check_dim(obj, w)?;
    check_indices(obj, indices)?;
    let d = obj.dim();
    let h = 1e-4 * (1.0 + w.amax());
    let mut m = DMatrix::zeros(d, d);
    let mut probe = w.clone();
    for i in 0..d {
        probe[i] = w[i] + h;
        let plus = batch_gradient(obj, &probe, indices)?;
        probe[i] = w[i] - h;
        let minus = batch_gradient(obj, &probe, indices)?;
        probe[i] = w[i];
        m.set_column(i, &((plus - minus) / (2.0 * h)));
    }
    Ok((&m + m.transpose()) * 0.5)
}

/// Step used for the third-order finite differences.
pub const THIRD_ORDER_STEP: f64 = 1e-3;

/// Contracts the batch third-derivative tensor with a symmetric matrix:
/// `out_i = sum_{l,s} ∂_i H_ls(w) M_ls`. The derivative of each Hessian
/// entry is taken by central differences of [`batch_hessian`].
pub fn third_order_contract<O: Objective + ?Sized>(
    obj: &O,
    w: &DVector<f64>,
    indices: &[usize],
    m: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let d = obj.dim();
    dense_guard(d)?;
    if m.nrows() != d || m.ncols() != d {
        return Err(LabError::DimensionMismatch {
            expected: d,
            actual: m.nrows(),
            context: "contraction matrix",
        });
    }
    let asym = asymmetry(m);
    if asym > 1e-12 * m.amax().max(1.0) {
        return Err(LabError::NotSymmetric(asym));
    }
    let h = THIRD_ORDER_STEP;
    let mut out = DVector::zeros(d);
    let mut probe = w.clone();
    for i in 0..d {
        probe[i] = w[i] + h;
        let plus = batch_hessian(obj, &probe, indices)?;
        probe[i] = w[i] - h;
        let minus = batch_hessian(obj, &probe, indices)?;
        probe[i] = w[i];
        let dh = (plus - minus) / (2.0 * h);
        out[i] = crate::linalg::frobenius_inner(&dh, m);
    }
    Ok(out)
}

/// Loads labeled points from CSV: a header row, feature columns, then an
/// integer class label in the last column. Fewer than `min_rows` rows is an
/// error (a dataset must cover every worker).
pub fn load_csv_points(path: &Path, min_rows: usize) -> Result<Vec<LabeledPoint>> {
    let parse_err = |msg: String| LabError::Parse {
        what: "dataset csv",
        msg,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let mut points = Vec::new();
    let mut width = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(e.to_string()))?;
        if record.len() < 2 {
            return Err(parse_err(format!("row {}: need features and a label", row + 1)));
        }
        if *width.get_or_insert(record.len()) != record.len() {
            return Err(parse_err(format!("row {}: ragged row", row + 1)));
        }
        let mut fields: Vec<&str> = record.iter().collect();
        let label_text = fields.pop().unwrap_or_default().trim();
        let label: i64 = label_text
            .parse()
            .map_err(|_| parse_err(format!("row {}: label `{label_text}` is not an integer", row + 1)))?;
        if label != 0 && label != 1 {
            return Err(parse_err(format!("row {}: label {label} is not 0 or 1", row + 1)));
        }
        let features = fields
            .iter()
            .map(|f| {
                f.trim()
                    .parse::<f64>()
                    .map_err(|_| parse_err(format!("row {}: bad feature `{f}`", row + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        points.push(LabeledPoint {
            features,
            label: label as u8,
        });
    }
    if points.len() < min_rows {
        return Err(parse_err(format!(
            "{} rows is fewer than the {min_rows} workers",
            points.len()
        )));
    }
    Ok(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn partition_sharding_covers_exactly() {
        for (n, m) in [(10, 3), (12, 4), (7, 7), (100, 16)] {
            let ds = Dataset::new(n).with_sharding(m, Sharding::Partition, 3).unwrap();
            let mut seen: Vec<usize> = (0..m).flat_map(|j| ds.shard(j).to_vec()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            for j in 0..m {
                let len = ds.shard(j).len() as f64;
                assert!((len - n as f64 / m as f64).abs() < 1.0);
            }
        }
        assert!(Dataset::new(3).with_sharding(4, Sharding::Partition, 0).is_err());
        let rep = Dataset::new(5).with_sharding(3, Sharding::Replicated, 0).unwrap();
        assert_eq!(rep.shard(2), &[0, 1, 2, 3, 4]);
    }

    #[test]
    fn batch_gradient_linearity() {
        let (obj, ds) = make_cubic_perturbed(4, 12, 5, 0.7);
        let w = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1]);
        let all = ds.all_indices().to_vec();
        let full = batch_gradient(&obj, &w, &all).unwrap();
        let a = batch_gradient(&obj, &w, &all[..6]).unwrap();
        let b = batch_gradient(&obj, &w, &all[6..]).unwrap();
        assert!(((a + b) / 2.0 - &full).amax() < 1e-12);

        // Size-weighted union.
        let c = batch_gradient(&obj, &w, &all[..3]).unwrap();
        let rest = batch_gradient(&obj, &w, &all[3..]).unwrap();
        assert!(((c * 3.0 + rest * 9.0) / 12.0 - &full).amax() < 1e-12);

        let single = batch_gradient(&obj, &w, &[4]).unwrap();
        assert_eq!(single, obj.sample_gradient(&w, 4));
        assert!(matches!(batch_gradient(&obj, &w, &[]), Err(LabError::EmptyBatch)));
        assert!(batch_gradient(&obj, &w, &[12]).is_err());
    }

    #[test]
    fn hessian_paths_agree_on_quadratic() {
        let (obj, ds) = make_quadratic(5, 6, 11);
        let w0 = DVector::from_element(5, 0.4);
        let w1 = DVector::from_element(5, -1.3);
        let all = ds.all_indices();
        let h0 = batch_hessian(&obj, &w0, all).unwrap();
        let h1 = batch_hessian(&obj, &w1, all).unwrap();
        assert_eq!(h0, h1);
        let fd = batch_hessian_fd(&obj, &w0, all).unwrap();
        assert!((fd - &h0).amax() <= 1e-6);
    }

    #[test]
    fn hessian_guard() {
        let (obj, _) = make_quadratic(201, 1, 0);
        let w = DVector::zeros(201);
        assert!(matches!(
            batch_hessian(&obj, &w, &[0]),
            Err(LabError::DimensionGuard { .. })
        ));
    }

    #[test]
    fn third_order_on_quadratic_vanishes() {
        let (obj, ds) = make_quadratic(4, 5, 2);
        let w = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0]);
        let m = DMatrix::from_fn(4, 4, |i, j| ((i + j) as f64 * 0.17).sin());
        let out = third_order_contract(&obj, &w, ds.all_indices(), &m).unwrap();
        assert!(out.amax() <= 5e-6);
        let bad = DMatrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64);
        assert!(matches!(
            third_order_contract(&obj, &w, ds.all_indices(), &bad),
            Err(LabError::NotSymmetric(_))
        ));
    }

    #[test]
    fn third_order_on_pure_cubic() {
        let obj = PolynomialObjective::pure_cubic();
        let w = DVector::from_vec(vec![0.4]);
        for sigma2 in [0.01, 0.25, 1.0] {
            let m = DMatrix::from_element(1, 1, sigma2);
            let out = third_order_contract(&obj, &w, &[0], &m).unwrap();
            assert!((out[0] - 6.0 * sigma2).abs() < 1e-9);
        }
    }

    #[test]
    fn third_order_is_linear_in_matrix() {
        let (obj, ds) = make_cubic_perturbed(3, 4, 9, 1.0);
        let w = DVector::from_vec(vec![0.2, -0.7, 1.1]);
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.2, 0.5, -0.1, 0.0, -0.1, 0.3]);
        let b = DMatrix::from_row_slice(3, 3, &[0.1, 0.0, 0.4, 0.0, 0.9, 0.0, 0.4, 0.0, 0.2]);
        let idx = ds.all_indices();
        let sum = third_order_contract(&obj, &w, idx, &(&a + &b)).unwrap();
        let sep = third_order_contract(&obj, &w, idx, &a).unwrap()
            + third_order_contract(&obj, &w, idx, &b).unwrap();
        assert!((sum - sep).amax() < 1e-6);
    }

    #[test]
    fn csv_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "x,y,label\n0.5,1.0,1\n-0.5,2.0,0\n1.5,0.0,1").unwrap();
        drop(f);
        let pts = load_csv_points(&path, 2).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[1].features, vec![-0.5, 2.0]);
        assert_eq!(pts[1].label, 0);
        assert!(load_csv_points(&path, 4).is_err());

        std::fs::write(&path, "x,label\n0.5,2\n").unwrap();
        assert!(load_csv_points(&path, 1).is_err());
        std::fs::write(&path, "x,label\nabc,1\n").unwrap();
        assert!(load_csv_points(&path, 1).is_err());
    }
}
