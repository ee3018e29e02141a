//! One-hidden-layer tanh network with logistic loss on a planar two-class
//! dataset. Gradients come from hand-written backpropagation; Hessians are
//! left to finite differences.

use std::f64::consts::PI;
use std::ops::Range;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Objective};
use crate::error::LabError;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub features: Vec<f64>,
    /// 0 or 1.
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    TwoMoons,
    Blobs,
}

impl FromStr for DatasetKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self, LabError> {
        match s {
            "two_moons" => Ok(DatasetKind::TwoMoons),
            "blobs" => Ok(DatasetKind::Blobs),
            other => Err(LabError::InvalidArgument(format!("unknown dataset kind `{other}`"))),
        }
    }
}

/// Balanced two-class planar data: the first `n/2` points carry label 0.
pub fn generate_points(kind: DatasetKind, n: usize, seed: u64) -> Vec<LabeledPoint> {
    let mut rng = rng::stream(seed, Purpose::Dataset, 0, 2);
    let half = n / 2;
    (0..n)
        .map(|i| {
            let label = u8::from(i >= half);
            let noise_x: f64 = rng.sample(StandardNormal);
            let noise_y: f64 = rng.sample(StandardNormal);
            let features = match kind {
                DatasetKind::TwoMoons => {
                    let t: f64 = rng.random_range(0.0..PI);
                    let (x, y) = if label == 0 {
                        (t.cos(), t.sin())
                    } else {
                        (1.0 - t.cos(), 0.5 - t.sin())
                    };
                    vec![x + 0.1 * noise_x, y + 0.1 * noise_y]
                }
                DatasetKind::Blobs => {
                    let cx = if label == 0 { -1.5 } else { 1.5 };
                    vec![cx + noise_x, noise_y]
                }
            };
            LabeledPoint { features, label }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    points: Vec<LabeledPoint>,
    inputs: usize,
    hidden: usize,
}

impl Mlp {
    /// # Panics
    /// If `points` is empty, ragged, or `hidden == 0`.
    pub fn new(points: Vec<LabeledPoint>, hidden: usize) -> Self {
        assert!(hidden >= 1, "hidden width must be positive");
        let inputs = points.first().expect("non-empty dataset").features.len();
        assert!(points.iter().all(|p| p.features.len() == inputs), "ragged dataset");
        Self {
            points,
            inputs,
            hidden,
        }
    }

    pub fn points(&self) -> &[LabeledPoint] {
        &self.points
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    // Parameter layout: W1 (hidden × inputs, row-major) | b1 | w2 | b2.
    fn b1_offset(&self) -> usize {
        self.hidden * self.inputs
    }

    fn w2_offset(&self) -> usize {
        self.b1_offset() + self.hidden
    }

    fn b2_offset(&self) -> usize {
        self.w2_offset() + self.hidden
    }

    fn forward(&self, w: &DVector<f64>, x: &[f64]) -> (Vec<f64>, f64) {
        let w1 = self.b1_offset();
        let w2 = self.w2_offset();
        let z: Vec<f64> = (0..self.hidden)
            .map(|k| {
                let row = &w.as_slice()[k * self.inputs..(k + 1) * self.inputs];
                let a: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[w1 + k];
                a.tanh()
            })
            .collect();
        let out = z.iter().enumerate().map(|(k, zk)| w[w2 + k] * zk).sum::<f64>() + w[self.b2_offset()];
        (z, out)
    }
}

fn signed(label: u8) -> f64 {
    if label == 1 {
        1.0
    } else {
        -1.0
    }
}

/// `ln(1 + e^{-m})`, stable for large |m|.
fn logistic_loss(margin: f64) -> f64 {
    if margin > 0.0 {
        (-margin).exp().ln_1p()
    } else {
        -margin + margin.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Objective for Mlp {
    fn dim(&self) -> usize {
        self.b2_offset() + 1
    }

    fn num_samples(&self) -> usize {
        self.points.len()
    }

    fn sample_loss(&self, w: &DVector<f64>, sample: usize) -> f64 {
        let p = &self.points[sample];
        let (_, out) = self.forward(w, &p.features);
        logistic_loss(signed(p.label) * out)
    }

    fn sample_gradient(&self, w: &DVector<f64>, sample: usize) -> DVector<f64> {
        let p = &self.points[sample];
        let (z, out) = self.forward(w, &p.features);
        let y = signed(p.label);
        // d/d(out) of ln(1 + exp(-y·out)).
        let dout = -y * sigmoid(-y * out);
        let mut g = DVector::zeros(self.dim());
        let (b1, w2, b2) = (self.b1_offset(), self.w2_offset(), self.b2_offset());
        g[b2] = dout;
        for k in 0..self.hidden {
            g[w2 + k] = dout * z[k];
            let da = dout * w[w2 + k] * (1.0 - z[k] * z[k]);
            g[b1 + k] = da;
            for (i, xi) in p.features.iter().enumerate() {
                g[k * self.inputs + i] = da * xi;
            }
        }
        g
    }

    fn filter_groups(&self) -> Option<Vec<Range<usize>>> {
        let mut groups: Vec<Range<usize>> = (0..self.hidden)
            .map(|k| k * self.inputs..(k + 1) * self.inputs)
            .collect();
        groups.push(self.b1_offset()..self.w2_offset());
        groups.push(self.w2_offset()..self.dim());
        Some(groups)
    }

    fn initial_point(&self, seed: u64) -> DVector<f64> {
        let mut rng = rng::stream(seed, Purpose::Init, usize::MAX >> 24, 1);
        let in_scale = 1.0 / (self.inputs as f64).sqrt();
        let out_scale = 1.0 / (self.hidden as f64).sqrt();
        let (b1, w2, b2) = (self.b1_offset(), self.w2_offset(), self.b2_offset());
        DVector::from_fn(self.dim(), |i, _| {
            let z: f64 = rng.sample(StandardNormal);
            if i < b1 {
                in_scale * z
            } else if (w2..b2).contains(&i) {
                out_scale * z
            } else {
                0.0
            }
        })
    }
}

/// Builds the network over a generated dataset of `n` points.
///
/// # Panics
/// If `hidden == 0` or `n < 4`.
pub fn make_mlp(hidden: usize, seed: u64, kind: DatasetKind, n: usize) -> (Mlp, Dataset) {
    assert!(n >= 4, "need at least 4 points");
    (Mlp::new(generate_points(kind, n, seed), hidden), Dataset::new(n))
}
