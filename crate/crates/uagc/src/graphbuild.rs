//! Sensor adjacency construction.
//!
//! Two factors: a Gaussian kernel of directed along-road distance (bandwidth
//! sigma, cutoff kappa) and the co-occurrence similarity of the generated
//! path set. Their entry-wise product is the adjacency used by the graph
//! convolution, normalized into forward/backward walk operators.

use rayon::prelude::*;
use thiserror::Error;

use crate::geodata::{shortest_distances_from, RoadGraph, SnappedSensor};
use crate::pathgen::PathSet;
use crate::sparse::{SparseError, SparseMatrix};

pub const DEFAULT_SIGMA_MILES: f64 = 5.0;
pub const DEFAULT_KAPPA_MILES: f64 = 80.0;

#[derive(Debug, Error)]
pub enum GraphBuildError {
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("shape mismatch: {0}x{0} vs {1}x{1}")]
    ShapeMismatch(usize, usize),
    #[error("sigma must be positive, got {0}")]
    BadSigma(f64),
}

/// The five matrices of the sensor graph plus the kernel parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorAdjacency {
    pub a_dist: SparseMatrix<f64>,
    pub a_cooc: SparseMatrix<f64>,
    /// `a_dist ⊙ a_cooc`, kept un-normalized.
    pub a: SparseMatrix<f64>,
    /// Row-normalized `a` (out-degree walk); zero rows stay zero.
    pub a_fwd: SparseMatrix<f64>,
    /// Row-normalized `a` transpose (in-degree walk); zero rows stay zero.
    pub a_bwd: SparseMatrix<f64>,
    pub sigma_miles: f64,
    pub kappa_miles: f64,
}

/// Gaussian kernel of directed along-road distance between snapped sensors:
/// `exp(-dist^2 / sigma^2)` when `dist < kappa`, else absent. The diagonal
/// is always 1 (a sensor is at distance zero from itself).
pub fn distance_adjacency(
    graph: &RoadGraph,
    sensors: &[SnappedSensor],
    sigma_miles: f64,
    kappa_miles: f64,
) -> Result<SparseMatrix<f64>, GraphBuildError> {
    if !(sigma_miles.is_finite() && sigma_miles > 0.0) {
        return Err(GraphBuildError::BadSigma(sigma_miles));
    }
    let n = sensors.len();
    let rows: Vec<Vec<(usize, f64)>> = sensors
        .par_iter()
        .map(|src| {
            let dist = shortest_distances_from(graph, src.node, Some(kappa_miles));
            sensors
                .iter()
                .enumerate()
                .filter_map(|(j, dst)| {
                    let d = dist[dst.node];
                    if d < kappa_miles {
                        Some((j, (-d * d / (sigma_miles * sigma_miles)).exp()))
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();
    let mut triplets = Vec::new();
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row {
            triplets.push((i, j, v));
        }
    }
    Ok(SparseMatrix::from_triplets(n, n, triplets)?)
}

/// Co-occurrence similarity: `coappear(i,j) / sqrt(appear(i) * appear(j))`.
/// Sensors appearing on no path get an all-zero row and column; the
/// diagonal is 1 wherever the sensor appears at all.
pub fn cooccurrence_matrix(paths: &PathSet, n_sensors: usize) -> Result<SparseMatrix<f64>, GraphBuildError> {
    assert_eq!(paths.appearance.len(), n_sensors, "path set built for a different sensor list");
    let mut triplets = Vec::new();
    for i in 0..n_sensors {
        if paths.appearance[i] > 0 {
            triplets.push((i, i, 1.0));
        }
    }
    for (&(i, j), &c) in &paths.coappearance {
        let denom = ((paths.appearance[i] * paths.appearance[j]) as f64).sqrt();
        if denom > 0.0 && c > 0 {
            let v = c as f64 / denom;
            triplets.push((i, j, v));
            triplets.push((j, i, v));
        }
    }
    Ok(SparseMatrix::from_triplets(n_sensors, n_sensors, triplets)?)
}

fn row_normalize(m: &SparseMatrix<f64>) -> SparseMatrix<f64> {
    let sums = m.row_sums();
    let factors: Vec<f64> = sums
        .into_iter()
        .map(|s| if s > 0.0 { 1.0 / s } else { 0.0 })
        .collect();
    m.scale_rows(&factors)
}

/// Entry-wise product of the two factors plus walk-normalized forms.
pub fn combine_adjacency(
    a_dist: SparseMatrix<f64>,
    a_cooc: SparseMatrix<f64>,
    sigma_miles: f64,
    kappa_miles: f64,
) -> Result<SensorAdjacency, GraphBuildError> {
    if a_dist.n_rows() != a_cooc.n_rows() || a_dist.n_cols() != a_cooc.n_cols() {
        return Err(GraphBuildError::ShapeMismatch(a_dist.n_rows(), a_cooc.n_rows()));
    }
    let a = a_dist.hadamard(&a_cooc)?;
    let a_fwd = row_normalize(&a);
    let a_bwd = row_normalize(&a.transpose());
    Ok(SensorAdjacency {
        a_dist,
        a_cooc,
        a,
        a_fwd,
        a_bwd,
        sigma_miles,
        kappa_miles,
    })
}

impl SensorAdjacency {
    pub fn n_sensors(&self) -> usize {
        self.a.n_rows()
    }

    /// Checks the structural invariants; returns a description of the first
    /// violation, if any.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.n_sensors();
        for (r, c, v) in self.a_dist.iter() {
            if r == c && (v - 1.0).abs() > 1e-12 {
                return Err(format!("a_dist diagonal at {r} is {v}, not 1"));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("a_dist({r},{c}) = {v} outside [0,1]"));
            }
        }
        for i in 0..n {
            if self.a_dist.get(i, i) != 1.0 {
                return Err(format!("a_dist diagonal missing at {i}"));
            }
        }
        for (r, c, v) in self.a_cooc.iter() {
            if (self.a_cooc.get(c, r) - v).abs() > 0.0 {
                return Err(format!("a_cooc not symmetric at ({r},{c})"));
            }
            if !(0.0..=1.0 + 1e-12).contains(&v) {
                return Err(format!("a_cooc({r},{c}) = {v} outside [0,1]"));
            }
        }
        for (r, c, v) in self.a.iter() {
            if !(0.0..=1.0 + 1e-12).contains(&v) {
                return Err(format!("a({r},{c}) = {v} outside [0,1]"));
            }
            if self.a_dist.get(r, c) == 0.0 {
                return Err(format!("a({r},{c}) nonzero but a_dist zero"));
            }
        }
        for (name, m) in [("a_fwd", &self.a_fwd), ("a_bwd", &self.a_bwd)] {
            for (r, s) in m.row_sums().into_iter().enumerate() {
                if s != 0.0 && (s - 1.0).abs() > 1e-9 {
                    return Err(format!("{name} row {r} sums to {s}"));
                }
            }
        }
        Ok(())
    }
}

/// Normalized betweenness centrality of the directed unweighted graph on the
/// matrix support (self-loops ignored), via Brandes' accumulation; the
/// normalizer is `(N-1)(N-2)`. Returns the per-node scores and their mean.
pub fn betweenness_centrality(a: &SparseMatrix<f64>) -> (Vec<f64>, f64) {
    let n = a.n_rows();
    if n < 3 {
        return (vec![0.0; n], 0.0);
    }
    let adjacency: Vec<Vec<usize>> = (0..n)
        .map(|r| {
            let (cols, _) = a.row(r);
            cols.iter().copied().filter(|&c| c != r).collect()
        })
        .collect();

    let mut centrality = vec![0.0f64; n];
    for s in 0..n {
        let mut stack = Vec::new();
        let mut pred: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut sigma = vec![0.0f64; n];
        let mut dist = vec![-1i64; n];
        sigma[s] = 1.0;
        dist[s] = 0;
        let mut queue = std::collections::VecDeque::new();
        queue.push_back(s);
        while let Some(v) = queue.pop_front() {
            stack.push(v);
            for &w in &adjacency[v] {
                if dist[w] < 0 {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                    pred[w].push(v);
                }
            }
        }
        let mut delta = vec![0.0f64; n];
        while let Some(w) = stack.pop() {
            for &v in &pred[w] {
                if sigma[w] > 0.0 {
                    delta[v] += (sigma[v] / sigma[w]) * (1.0 + delta[w]);
                }
            }
            if w != s {
                centrality[w] += delta[w];
            }
        }
    }
    let norm = 1.0 / ((n - 1) * (n - 2)) as f64;
    for c in &mut centrality {
        *c *= norm;
    }
    let mean = centrality.iter().sum::<f64>() / n as f64;
    (centrality, mean)
}
