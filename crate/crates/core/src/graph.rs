//! Sensor graph construction.
//!
//! Two channels are linked when the absolute value of their dependence over
//! the training cycles exceeds a threshold `lambda`. The default measure is
//! Pearson correlation, which is what makes a threshold in `[0, 1]`
//! meaningful; raw covariance is available for comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{EngineTrajectory, CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DependenceMeasure {
    #[default]
    Correlation,
    Covariance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StoredAdjacency", into = "StoredAdjacency")]
pub struct AdjacencyMatrix {
    nodes: usize,
    lambda: f64,
    /// Row-major binary adjacency without self-loops.
    edges: Vec<u8>,
    /// `D^-1/2 (A + I) D^-1/2`.
    propagation: Tensor,
}

/// On-disk form: the propagation matrix is rebuilt on load.
#[derive(Serialize, Deserialize)]
struct StoredAdjacency {
    nodes: usize,
    lambda: f64,
    edges: Vec<u8>,
}

impl TryFrom<StoredAdjacency> for AdjacencyMatrix {
    type Error = Error;

    fn try_from(s: StoredAdjacency) -> Result<Self> {
        Self::from_binary(s.nodes, s.edges, s.lambda)
    }
}

impl From<AdjacencyMatrix> for StoredAdjacency {
    fn from(a: AdjacencyMatrix) -> Self {
        Self {
            nodes: a.nodes,
            lambda: a.lambda,
            edges: a.edges,
        }
    }
}

impl AdjacencyMatrix {
    /// Wraps an existing binary adjacency (must be symmetric with a zero
    /// diagonal).
    pub fn from_binary(nodes: usize, edges: Vec<u8>, lambda: f64) -> Result<Self> {
        if nodes == 0 || edges.len() != nodes * nodes {
            return Err(Error::Dimension(format!(
                "{} adjacency entries for {nodes} nodes",
                edges.len()
            )));
        }
        for i in 0..nodes {
            if edges[i * nodes + i] != 0 {
                return Err(Error::Parameter(format!("self-loop on node {i} in binary adjacency")));
            }
            for j in 0..nodes {
                let e = edges[i * nodes + j];
                if e > 1 || e != edges[j * nodes + i] {
                    return Err(Error::Parameter("adjacency must be symmetric and binary".into()));
                }
            }
        }
        let propagation = normalize_propagation(nodes, &edges);
        Ok(Self {
            nodes,
            lambda,
            edges,
            propagation,
        })
    }

    /// A graph with no edges: propagation is the identity.
    pub fn empty(nodes: usize) -> Self {
        Self::from_binary(nodes, vec![0; nodes * nodes], 1.0).expect("valid empty graph")
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges[i * self.nodes + j] == 1
    }

    pub fn edges(&self) -> &[u8] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.iter().filter(|&&e| e == 1).count() / 2
    }

    pub fn propagation(&self) -> &Tensor {
        &self.propagation
    }

    /// Attention neighbourhoods: graph neighbours plus the node itself.
    pub fn neighbor_mask(&self) -> Vec<bool> {
        (0..self.nodes * self.nodes)
            .map(|idx| self.edges[idx] == 1 || idx / self.nodes == idx % self.nodes)
            .collect()
    }

    /// Relabels nodes: new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.nodes;
        let mut edges = vec![0; n * n];
        for i in 0..n {
            for j in 0..n {
                edges[i * n + j] = self.edges[perm[i] * n + perm[j]];
            }
        }
        Self::from_binary(n, edges, self.lambda)
    }

    /// The binary matrix as a comma-separated grid, one row per line.
    pub fn to_csv(&self) -> String {
        grid_csv(self.nodes, |i, j| self.edges[i * self.nodes + j].to_string())
    }

    /// The propagation matrix as a comma-separated grid.
    pub fn propagation_csv(&self) -> String {
        grid_csv(self.nodes, |i, j| {
            format!("{}", self.propagation.data()[i * self.nodes + j])
        })
    }

    pub fn from_csv(text: &str, lambda: f64) -> Result<Self> {
        let mut edges = Vec::new();
        let mut rows = 0;
        for (lineno, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            rows += 1;
            for tok in line.split(',') {
                let v: u8 = tok
                    .trim()
                    .parse()
                    .map_err(|_| Error::format("adjacency csv", lineno + 1, format!("bad entry {tok:?}")))?;
                edges.push(v);
            }
        }
        Self::from_binary(rows, edges, lambda)
    }
}

fn grid_csv(n: usize, cell: impl Fn(usize, usize) -> String) -> String {
    let mut out = String::new();
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| cell(i, j)).collect();
        writeln!(out, "{}", row.join(",")).expect("write to string");
    }
    out
}

/// Self-loop-augmented symmetric normalization `D^-1/2 (A + I) D^-1/2`.
pub fn normalize_propagation(nodes: usize, edges: &[u8]) -> Tensor {
    let degree: Vec<f64> = (0..nodes)
        .map(|i| 1.0 + edges[i * nodes..(i + 1) * nodes].iter().map(|&e| f64::from(e)).sum::<f64>())
        .collect();
    let mut data = vec![0.0; nodes * nodes];
    for i in 0..nodes {
        for j in 0..nodes {
            let a = if i == j { 1.0 } else { f64::from(edges[i * nodes + j]) };
            if a != 0.0 {
                data[i * nodes + j] = a / (degree[i] * degree[j]).sqrt();
            }
        }
    }
    Tensor::new(vec![nodes, nodes], data).expect("square matrix")
}

/// Pairwise dependence between channel series (`columns[i]` is channel `i`).
///
/// Correlations involving a zero-variance channel are 0.
pub fn dependence_matrix(columns: &[Vec<f64>], measure: DependenceMeasure) -> Result<Vec<f64>> {
    let s = columns.len();
    let n = columns.first().map_or(0, Vec::len);
    if s == 0 || n < 2 || columns.iter().any(|c| c.len() != n) {
        return Err(Error::Dimension(
            "dependence needs equal-length channels with at least 2 samples".into(),
        ));
    }
    let means: Vec<f64> = columns.iter().map(|c| c.iter().sum::<f64>() / n as f64).collect();
    let constant: Vec<bool> = columns
        .iter()
        .map(|c| c.iter().all(|&v| v == c[0]))
        .collect();
    let centered: Vec<Vec<f64>> = columns
        .iter()
        .zip(&means)
        .map(|(c, m)| c.iter().map(|v| v - m).collect())
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let var: Vec<f64> = centered.iter().map(|c| dot(c, c)).collect();
    let mut out = vec![0.0; s * s];
    for i in 0..s {
        for j in i..s {
            let v = match measure {
                DependenceMeasure::Covariance => dot(&centered[i], &centered[j]) / (n - 1) as f64,
                DependenceMeasure::Correlation => {
                    if constant[i] || constant[j] {
                        0.0
                    } else {
                        let r = dot(&centered[i], &centered[j]) / (var[i] * var[j]).sqrt();
                        r.clamp(-1.0, 1.0)
                    }
                }
            };
            out[i * s + j] = v;
            out[j * s + i] = v;
        }
    }
    Ok(out)
}

/// Thresholds `|dependence| > lambda` off the diagonal.
pub fn build_adjacency_from_columns(
    columns: &[Vec<f64>],
    lambda: f64,
    measure: DependenceMeasure,
) -> Result<AdjacencyMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("threshold {lambda} outside [0, 1]")));
    }
    let s = columns.len();
    let dep = dependence_matrix(columns, measure)?;
    let edges = (0..s * s)
        .map(|idx| u8::from(idx / s != idx % s && dep[idx].abs() > lambda))
        .collect();
    AdjacencyMatrix::from_binary(s, edges, lambda)
}

/// Builds the static sensor graph from all cycles of the (normalized)
/// training trajectories.
pub fn build_adjacency(
    trajs: &[EngineTrajectory],
    lambda: f64,
    measure: DependenceMeasure,
) -> Result<AdjacencyMatrix> {
    let mut columns = vec![Vec::new(); CHANNELS];
    for t in trajs {
        for i in 0..t.len() {
            for (col, v) in columns.iter_mut().zip(t.channels(i)) {
                col.push(v);
            }
        }
    }
    build_adjacency_from_columns(&columns, lambda, measure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spectral_radius(m: &Tensor) -> f64 {
        let n = m.shape()[0];
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.37).collect();
        let mut lambda = 0.0;
        // Power iteration on M², whose dominant eigenvalue is rho(M)².
        for _ in 0..2000 {
            let mut w = v.clone();
            for _ in 0..2 {
                w = (0..n)
                    .map(|i| (0..n).map(|j| m.data()[i * n + j] * w[j]).sum())
                    .collect();
            }
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            lambda = norm / v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v = w.iter().map(|x| x / norm).collect();
        }
        lambda.sqrt()
    }

    #[test]
    fn perfect_correlation_links() {
        let a: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = a.iter().map(|v| 2.0 * v + 3.0).collect();
        let g = build_adjacency_from_columns(&[a, b], 0.999, DependenceMeasure::Correlation).unwrap();
        assert!(g.has_edge(0, 1) && g.has_edge(1, 0));
    }

    #[test]
    fn constant_channel_is_isolated() {
        let a: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let c = vec![4.2; 20];
        let g = build_adjacency_from_columns(&[a.clone(), c, a], 0.0, DependenceMeasure::Correlation)
            .unwrap();
        assert!(!g.has_edge(0, 1) && !g.has_edge(1, 2));
        assert!(g.has_edge(0, 2));
    }

    #[test]
    fn threshold_range_checked() {
        let a: Vec<f64> = (0..5).map(f64::from).collect();
        for bad in [-0.1, 1.1] {
            assert!(matches!(
                build_adjacency_from_columns(&[a.clone(), a.clone()], bad, DependenceMeasure::Correlation),
                Err(Error::Parameter(_))
            ));
        }
    }

    #[test]
    fn hand_computed_correlations() {
        // Brute-force Pearson correlation oracle, computed independently.
        fn pearson(x: &[f64], y: &[f64]) -> f64 {
            let n = x.len() as f64;
            let (sx, sy): (f64, f64) = (x.iter().sum(), y.iter().sum());
            let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let sxx: f64 = x.iter().map(|a| a * a).sum();
            let syy: f64 = y.iter().map(|a| a * a).sum();
            (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
        }
        let c1 = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let c2 = vec![1.2, 1.9, 3.4, 3.7, 5.3, 5.8];
        let c3 = vec![2.0, -1.0, 4.0, 0.0, 3.0, 1.0];
        let cols = [c1, c2, c3];
        let lambda = 0.4;
        let g = build_adjacency_from_columns(&cols, lambda, DependenceMeasure::Correlation).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = i != j && pearson(&cols[i], &cols[j]).abs() > lambda;
                assert_eq!(g.has_edge(i, j), expect, "pair ({i},{j})");
            }
        }
    }

    #[test]
    fn propagation_examples() {
        let g = AdjacencyMatrix::empty(3);
        assert_eq!(g.propagation(), &Tensor::eye(3));
        let k2 = AdjacencyMatrix::from_binary(2, vec![0, 1, 1, 0], 0.5).unwrap();
        assert_eq!(k2.propagation().data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn rejects_asymmetric_binary() {
        assert!(AdjacencyMatrix::from_binary(2, vec![0, 1, 0, 0], 0.5).is_err());
        assert!(AdjacencyMatrix::from_binary(2, vec![1, 0, 0, 0], 0.5).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let g = AdjacencyMatrix::from_binary(3, vec![0, 1, 0, 1, 0, 1, 0, 1, 0], 0.3).unwrap();
        assert_eq!(AdjacencyMatrix::from_csv(&g.to_csv(), 0.3).unwrap(), g);
        assert_eq!(g.edge_count(), 2);
    }

    fn arb_graph() -> impl Strategy<Value = (usize, Vec<u8>)> {
        (2usize..8).prop_flat_map(|n| {
            proptest::collection::vec(0u8..2, n * (n - 1) / 2).prop_map(move |upper| {
                let mut e = vec![0u8; n * n];
                let mut it = upper.into_iter();
                for i in 0..n {
                    for j in i + 1..n {
                        let v = it.next().unwrap();
                        e[i * n + j] = v;
                        e[j * n + i] = v;
                    }
                }
                (n, e)
            })
        })
    }

    proptest! {
        #[test]
        fn propagation_symmetric_with_bounded_spectrum((n, edges) in arb_graph()) {
            let g = AdjacencyMatrix::from_binary(n, edges, 0.5).unwrap();
            let p = g.propagation();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(p.data()[i * n + j], p.data()[j * n + i]);
                }
            }
            prop_assert!(spectral_radius(p) <= 1.0 + 1e-9);
        }

        #[test]
        fn propagation_is_permutation_equivariant(
            (n, edges) in arb_graph(),
            seed in any::<u64>(),
        ) {
            let g = AdjacencyMatrix::from_binary(n, edges, 0.5).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                perm.swap(i, (s >> 33) as usize % (i + 1));
            }
            let gp = g.permuted(&perm).unwrap();
            for i in 0..n {
                for j in 0..n {
                    prop_assert_eq!(
                        gp.propagation().data()[i * n + j],
                        g.propagation().data()[perm[i] * n + perm[j]]
                    );
                }
            }
        }

        #[test]
        fn adjacency_invariant_to_affine_rescaling(
            a in 0.1f64..50.0,
            b in -100.0f64..100.0,
            which in 0usize..4,
            seed in 0u64..1000,
        ) {
            let cols: Vec<Vec<f64>> = (0..4)
                .map(|c| (0..40).map(|t| {
                    let x = (t as f64 * (0.3 + c as f64 * 0.17) + seed as f64).sin();
                    x + 0.1 * c as f64 * t as f64 / 40.0
                }).collect())
                .collect();
            let mut scaled = cols.clone();
            scaled[which] = scaled[which].iter().map(|v| a * v + b).collect();
            let g1 = build_adjacency_from_columns(&cols, 0.5, DependenceMeasure::Correlation).unwrap();
            let g2 = build_adjacency_from_columns(&scaled, 0.5, DependenceMeasure::Correlation).unwrap();
            let d1 = dependence_matrix(&cols, DependenceMeasure::Correlation).unwrap();
            // Only pairs whose correlation sits away from the threshold are
            // guaranteed stable under floating-point rescaling.
            for ((d, a), b) in d1.iter().zip(g1.edges()).zip(g2.edges()) {
                if (d.abs() - 0.5).abs() > 1e-9 {
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}
