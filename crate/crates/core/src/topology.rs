//! Gossip matrices for the standard communication topologies and their
//! spectral diagnostics.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::symmetric_eigen;
use crate::rng::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Ring,
    Grid,
    Exponential,
    FullyConnected,
    Star,
    Custom,
}

impl TopologyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TopologyKind::Ring => "ring",
            TopologyKind::Grid => "grid",
            TopologyKind::Exponential => "exponential",
            TopologyKind::FullyConnected => "fully_connected",
            TopologyKind::Star => "star",
            TopologyKind::Custom => "custom",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TopologyKind {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ring" => TopologyKind::Ring,
            "grid" => TopologyKind::Grid,
            "exponential" => TopologyKind::Exponential,
            "fully_connected" => TopologyKind::FullyConnected,
            "star" => TopologyKind::Star,
            "custom" => TopologyKind::Custom,
            other => {
                return Err(LabError::InvalidTopology(format!(
                    "unknown topology kind `{other}`"
                )))
            }
        })
    }
}

/// Symmetric doubly stochastic mixing matrix together with the graph it
/// was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct GossipMatrix {
    entries: DMatrix<f64>,
    kind: TopologyKind,
    /// Undirected edges `(j, k)` with `j < k`, sorted.
    edges: Vec<(usize, usize)>,
}

impl GossipMatrix {
    pub fn m(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.entries[(j, k)]
    }

    /// Builds the mixing matrix of an arbitrary undirected graph.
    ///
    /// Regular graphs get uniform closed-neighborhood weights `1/(deg+1)`;
    /// everything else gets Metropolis–Hastings weights with the self-weight
    /// absorbing the remainder of each row.
    pub fn from_edges(kind: TopologyKind, m: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if m == 0 {
            return Err(LabError::InvalidTopology("worker count must be positive".into()));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= m || b >= m {
                return Err(LabError::InvalidTopology(format!(
                    "edge ({a}, {b}) references a worker outside 0..{m}"
                )));
            }
            if a == b {
                return Err(LabError::InvalidTopology(format!("self-loop on worker {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();

        let mut degree = vec![0usize; m];
        for &(a, b) in &edges {
            degree[a] += 1;
            degree[b] += 1;
        }
        let regular = degree.iter().all(|&d| d == degree[0]);

        let mut entries = DMatrix::<f64>::zeros(m, m);
        if regular {
            let w = 1.0 / (degree[0] as f64 + 1.0);
            for j in 0..m {
                entries[(j, j)] = w;
            }
            for &(a, b) in &edges {
                entries[(a, b)] = w;
                entries[(b, a)] = w;
            }
        } else {
            for &(a, b) in &edges {
                let w = 1.0 / (1.0 + degree[a].max(degree[b]) as f64);
                entries[(a, b)] = w;
                entries[(b, a)] = w;
            }
            for j in 0..m {
                let off: f64 = (0..m).filter(|&k| k != j).map(|k| entries[(j, k)]).sum();
                entries[(j, j)] = 1.0 - off;
            }
        }
        Ok(Self {
            entries,
            kind,
            edges,
        })
    }

    /// Reads a custom topology: first line `m`, then one `j k` edge per line
    /// (0-indexed). Blank lines and `#` comments are ignored; duplicate edges
    /// are rejected.
    pub fn from_adjacency_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .enumerate()
            .filter(|(_, l)| !l.is_empty());
        let parse_err = |line: usize, msg: String| LabError::Parse {
            what: "topology file",
            msg: format!("line {}: {msg}", line + 1),
        };
        let (first_no, first) = lines
            .next()
            .ok_or_else(|| parse_err(0, "missing worker count".into()))?;
        let m: usize = first
            .parse()
            .map_err(|_| parse_err(first_no, format!("expected worker count, got `{first}`")))?;
        let mut seen = BTreeSet::new();
        let mut edges = Vec::new();
        for (no, line) in lines {
            let mut parts = line.split_whitespace();
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(parse_err(no, format!("expected `j k`, got `{line}`")));
            };
            let a: usize = a
                .parse()
                .map_err(|_| parse_err(no, format!("bad worker index `{a}`")))?;
            let b: usize = b
                .parse()
                .map_err(|_| parse_err(no, format!("bad worker index `{b}`")))?;
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(parse_err(no, format!("duplicate edge ({a}, {b})")));
            }
            edges.push((a, b));
        }
        Self::from_edges(TopologyKind::Custom, m, &edges)
    }

    pub fn from_adjacency_file(path: &Path) -> Result<Self> {
        Self::from_adjacency_text(&std::fs::read_to_string(path)?)
    }

    /// Checks every structural invariant, returning a description of the
    /// first violation.
    pub fn validate(&self) -> std::result::Result<(), String> {
        let m = self.m();
        let on_edge: BTreeSet<(usize, usize)> = self.edges.iter().copied().collect();
        for j in 0..m {
            let row: f64 = self.entries.row(j).iter().sum();
            if (row - 1.0).abs() > 1e-12 {
                return Err(format!("row {j} sums to {row}"));
            }
            for k in 0..m {
                let v = self.entries[(j, k)];
                if v != self.entries[(k, j)] {
                    return Err(format!("asymmetric at ({j}, {k})"));
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(format!("entry ({j}, {k}) = {v} outside [0, 1]"));
                }
                if j != k && (v != 0.0) != on_edge.contains(&(j.min(k), j.max(k))) {
                    return Err(format!("sparsity pattern broken at ({j}, {k})"));
                }
            }
        }
        Ok(())
    }
}

/// Builds one of the named topologies on `m` workers.
pub fn build_topology(kind: TopologyKind, m: usize) -> Result<GossipMatrix> {
    let too_small = |min: usize| {
        LabError::InvalidTopology(format!("{kind} topology needs at least {min} workers, got {m}"))
    };
    if m == 0 {
        return Err(too_small(1));
    }
    let mut edges = Vec::new();
    match kind {
        TopologyKind::Ring => {
            if m < 3 {
                return Err(too_small(3));
            }
            edges.extend((0..m).map(|j| (j, (j + 1) % m)));
        }
        TopologyKind::FullyConnected => {
            for j in 0..m {
                edges.extend(((j + 1)..m).map(|k| (j, k)));
            }
        }
        TopologyKind::Star => {
            if m < 2 {
                return Err(too_small(2));
            }
            edges.extend((1..m).map(|k| (0, k)));
        }
        TopologyKind::Grid => {
            let side = (m as f64).sqrt().round() as usize;
            if side * side != m {
                return Err(LabError::InvalidTopology(format!(
                    "grid topology needs a perfect-square worker count, got {m}"
                )));
            }
            // 2D torus: wrap-around in both directions.
            let id = |r: usize, c: usize| r * side + c;
            for r in 0..side {
                for c in 0..side {
                    let right = id(r, (c + 1) % side);
                    let down = id((r + 1) % side, c);
                    for other in [right, down] {
                        if other != id(r, c) {
                            edges.push((id(r, c), other));
                        }
                    }
                }
            }
        }
        TopologyKind::Exponential => {
            // Every power-of-two hop below m, in both directions.
            let mut hop = 1;
            while hop < m {
                for j in 0..m {
                    let k = (j + hop) % m;
                    if k != j {
                        edges.push((j, k));
                    }
                }
                hop *= 2;
            }
        }
        TopologyKind::Custom => {
            return Err(LabError::InvalidTopology(
                "custom topologies are built from an adjacency file".into(),
            ))
        }
    }
    GossipMatrix::from_edges(kind, m, &edges)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// `max(|λ₂|, |λ_m|)`.
    pub lambda: f64,
    pub spectral_gap: f64,
}

pub fn spectral_report(p: &GossipMatrix) -> Result<SpectralReport> {
    let eig = symmetric_eigen(p.entries())?;
    // Values this close to zero are solver round-off of exact zeros.
    let values: Vec<f64> = eig
        .values
        .into_iter()
        .map(|v| if v.abs() < 1e-13 { 0.0 } else { v })
        .collect();
    let lambda = if values.len() < 2 {
        0.0
    } else {
        values[1].abs().max(values[values.len() - 1].abs())
    };
    Ok(SpectralReport {
        spectral_gap: (1.0 - lambda).clamp(0.0, 1.0),
        lambda,
        eigenvalues: values,
    })
}

/// One communication round: returns `P W` for an `m × d` parameter stack.
pub fn gossip_mix(p: &GossipMatrix, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if w.nrows() != p.m() {
        return Err(LabError::DimensionMismatch {
            expected: p.m(),
            actual: w.nrows(),
            context: "parameter stack rows vs gossip matrix size",
        });
    }
    Ok(p.entries() * w)
}

/// Relabels workers with a seeded uniform permutation: returns `Π P Πᵀ`.
pub fn shuffle_workers(p: &GossipMatrix, seed: u64) -> GossipMatrix {
    let m = p.m();
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut rng::stream(seed, Purpose::Shuffle, 0, 0));
    // Worker j moves to position perm[j].
    let mut entries = DMatrix::<f64>::zeros(m, m);
    for j in 0..m {
        for k in 0..m {
            entries[(perm[j], perm[k])] = p.entries[(j, k)];
        }
    }
    let mut edges: Vec<(usize, usize)> = p
        .edges
        .iter()
        .map(|&(a, b)| {
            let (x, y) = (perm[a], perm[b]);
            (x.min(y), x.max(y))
        })
        .collect();
    edges.sort_unstable();
    GossipMatrix {
        entries,
        kind: p.kind,
        edges,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn circulant_ring_lambda(m: usize) -> f64 {
        (1..m)
            .map(|k| ((1.0 + 2.0 * (2.0 * PI * k as f64 / m as f64).cos()) / 3.0).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn fully_connected_is_uniform() {
        let p = build_topology(TopologyKind::FullyConnected, 4).unwrap();
        assert!(p.entries().iter().all(|&v| v == 0.25));
        let r = spectral_report(&build_topology(TopologyKind::FullyConnected, 8).unwrap()).unwrap();
        assert_eq!(r.spectral_gap, 1.0);
        assert!((r.eigenvalues[0] - 1.0).abs() < 1e-10);
        assert!(r.eigenvalues[1..].iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn ring_rows_and_small_cases() {
        let p = build_topology(TopologyKind::Ring, 4).unwrap();
        let third = 1.0 / 3.0;
        let expected = [third, third, 0.0, third];
        for (k, want) in expected.iter().enumerate() {
            assert_eq!(p.get(0, k), *want);
        }
        let p3 = build_topology(TopologyKind::Ring, 3).unwrap();
        for j in 0..3 {
            let row: f64 = p3.entries().row(j).iter().sum();
            assert!((row - 1.0).abs() < 1e-15);
            for k in 0..3 {
                assert!((p3.get(j, k) - third).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ring_gaps_match_circulant_formula() {
        let r4 = spectral_report(&build_topology(TopologyKind::Ring, 4).unwrap()).unwrap();
        assert!((r4.spectral_gap - 2.0 / 3.0).abs() < 1e-10);
        let r16 = spectral_report(&build_topology(TopologyKind::Ring, 16).unwrap()).unwrap();
        assert!((r16.spectral_gap - 0.05075).abs() < 1e-5);
        for m in [5, 7, 10, 31] {
            let r = spectral_report(&build_topology(TopologyKind::Ring, m).unwrap()).unwrap();
            assert!((r.lambda - circulant_ring_lambda(m)).abs() < 1e-10, "m={m}");
        }
    }

    #[test]
    fn minimum_sizes_are_enforced() {
        assert!(build_topology(TopologyKind::Ring, 2).is_err());
        assert!(build_topology(TopologyKind::Star, 1).is_err());
        assert!(build_topology(TopologyKind::Grid, 5).is_err());
        assert!(build_topology(TopologyKind::FullyConnected, 0).is_err());
        assert!(build_topology(TopologyKind::Grid, 9).is_ok());
    }

    #[test]
    fn all_topologies_satisfy_invariants() {
        for m in 1..=36 {
            for kind in [
                TopologyKind::Ring,
                TopologyKind::Grid,
                TopologyKind::Exponential,
                TopologyKind::FullyConnected,
                TopologyKind::Star,
            ] {
                if let Ok(p) = build_topology(kind, m) {
                    p.validate().unwrap_or_else(|e| panic!("{kind} m={m}: {e}"));
                    let r = spectral_report(&p).unwrap();
                    assert!((r.eigenvalues[0] - 1.0).abs() < 1e-10);
                    assert!(r.eigenvalues.iter().all(|v| (-1.0 - 1e-10..=1.0 + 1e-10).contains(v)));
                    assert!((0.0..=1.0).contains(&r.spectral_gap));
                }
            }
        }
    }

    #[test]
    fn star_uses_metropolis_weights() {
        let p = build_topology(TopologyKind::Star, 5).unwrap();
        // Hub degree 4, leaves degree 1: edge weight 1/(1+4).
        assert!((p.get(0, 1) - 0.2).abs() < 1e-15);
        assert!((p.get(1, 1) - 0.8).abs() < 1e-15);
        assert!((p.get(0, 0) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn gap_decreases_from_complete_to_ring() {
        for m in [5, 8, 16, 25] {
            let full = spectral_report(&build_topology(TopologyKind::FullyConnected, m).unwrap()).unwrap();
            let ring = spectral_report(&build_topology(TopologyKind::Ring, m).unwrap()).unwrap();
            assert!(full.spectral_gap > ring.spectral_gap);
        }
    }

    #[test]
    fn gossip_mix_cases() {
        let id = GossipMatrix::from_edges(TopologyKind::Custom, 3, &[]).unwrap();
        let w = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(gossip_mix(&id, &w).unwrap(), w);

        let full = build_topology(TopologyKind::FullyConnected, 3).unwrap();
        let mixed = gossip_mix(&full, &w).unwrap();
        for j in 0..3 {
            assert!((mixed[(j, 0)] - 3.0).abs() < 1e-12);
            assert!((mixed[(j, 1)] - 4.0).abs() < 1e-12);
        }

        let ring = build_topology(TopologyKind::Ring, 4).unwrap();
        let one_hot = DMatrix::<f64>::identity(4, 4);
        let out = gossip_mix(&ring, &one_hot).unwrap();
        let third = 1.0 / 3.0;
        for j in 0..4 {
            for k in 0..4 {
                let expected = if (j + 2) % 4 == k { 0.0 } else { third };
                assert_eq!(out[(j, k)], expected);
            }
        }

        assert!(gossip_mix(&ring, &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn shuffling_preserves_spectrum() {
        let full = build_topology(TopologyKind::FullyConnected, 6).unwrap();
        for seed in 0..5 {
            assert_eq!(shuffle_workers(&full, seed).entries(), full.entries());
        }
        let ring = build_topology(TopologyKind::Ring, 4).unwrap();
        let base = spectral_report(&ring).unwrap();
        for seed in 0..10 {
            let shuffled = spectral_report(&shuffle_workers(&ring, seed)).unwrap();
            for (a, b) in base.eigenvalues.iter().zip(&shuffled.eigenvalues) {
                assert!((a - b).abs() < 1e-10);
            }
        }
        let r5 = build_topology(TopologyKind::Ring, 5).unwrap();
        let layouts: BTreeSet<Vec<(usize, usize)>> =
            (0..8).map(|s| shuffle_workers(&r5, s).edges().to_vec()).collect();
        assert!(layouts.len() > 1);
        for s in 0..8 {
            shuffle_workers(&r5, s).validate().unwrap();
        }
    }

    #[test]
    fn adjacency_file_parsing() {
        let p = GossipMatrix::from_adjacency_text("4\n0 1\n1 2\n# chord\n2 3\n").unwrap();
        assert_eq!(p.kind(), TopologyKind::Custom);
        assert_eq!(p.edges(), &[(0, 1), (1, 2), (2, 3)]);
        p.validate().unwrap();
        assert!(GossipMatrix::from_adjacency_text("3\n0 1\n1 0\n").is_err());
        assert!(GossipMatrix::from_adjacency_text("3\n0 3\n").is_err());
        assert!(GossipMatrix::from_adjacency_text("3\n0 1 2\n").is_err());
        assert!(GossipMatrix::from_adjacency_text("").is_err());
    }
}
