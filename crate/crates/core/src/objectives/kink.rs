use nalgebra::{DMatrix, DVector};

use super::Objective;

/// One-dimensional Huber loss: quadratic within `width` of the origin and
/// linear outside. Its loss is 1-Lipschitz while its gradient is
/// `1/width`-Lipschitz, so a narrow kink gives `β ≫ α`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HuberKink {
    pub width: f64,
}

impl HuberKink {
    pub fn new(width: f64) -> Self {
        assert!(width > 0.0, "kink width must be positive");
        Self { width }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        (x / self.width).clamp(-1.0, 1.0)
    }
}

impl Objective for HuberKink {
    fn dim(&self) -> usize {
        1
    }

    fn num_samples(&self) -> usize {
        1
    }

    fn sample_loss(&self, w: &DVector<f64>, _sample: usize) -> f64 {
        let x = w[0].abs();
        if x <= self.width {
            x * x / (2.0 * self.width)
        } else {
            x - self.width / 2.0
        }
    }

    fn sample_gradient(&self, w: &DVector<f64>, _sample: usize) -> DVector<f64> {
        DVector::from_element(1, self.derivative(w[0]))
    }

    fn sample_hessian(&self, w: &DVector<f64>, _sample: usize) -> Option<DMatrix<f64>> {
        let curv = if w[0].abs() < self.width { 1.0 / self.width } else { 0.0 };
        Some(DMatrix::from_element(1, 1, curv))
    }

    fn has_analytic_hessian(&self) -> bool {
        true
    }

    fn initial_point(&self, _seed: u64) -> DVector<f64> {
        DVector::from_element(1, 1.0)
    }
}
