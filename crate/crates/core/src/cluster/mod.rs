//! Clustering of runs (EMD between distributions) and of forcings (cosine
//! between transport fields), plus month-by-month timelines.

mod hdbscan;
mod mds;
mod timeline;

pub use hdbscan::hdbscan;
pub use mds::{classical_mds, mds_1d};
pub use timeline::{
    forcing_field, forcing_timeline, mean_field, monthly_timeline, ClusterAggregate, EntityLine,
    MonthClusters, MonthlyClusterTimeline, TimelineCluster,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compare::{optimal_transport, CompareError, VectorField};
use crate::distribution::{DistError, RunDistribution};
use crate::geometry::Point;
use crate::par;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least {min} entities, found {found}")]
    TooFewEntities { found: usize, min: usize },
    #[error("distribution {0} is empty")]
    EmptyDistribution(String),
    #[error("invalid distance matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("no member for {gcm} under {ssp}")]
    MissingMember { gcm: String, ssp: String },
    #[error("vector fields share no supported non-zero cell")]
    NoJointSupport,
    #[error(transparent)]
    Compare(#[from] CompareError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

pub type Result<T> = std::result::Result<T, ClusterError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub labels: Vec<String>,
    pub d: Vec<Vec<f64>>,
}

impl DistanceMatrix {
    /// Checks shape, finiteness, zero diagonal and symmetry to 1e-9.
    pub fn new(labels: Vec<String>, d: Vec<Vec<f64>>) -> Result<Self> {
        let n = labels.len();
        if d.len() != n || d.iter().any(|r| r.len() != n) {
            return Err(ClusterError::InvalidMatrix(format!("expected {n}x{n}")));
        }
        for i in 0..n {
            if d[i][i] != 0.0 {
                return Err(ClusterError::InvalidMatrix(format!("d[{i}][{i}] is not zero")));
            }
            for j in 0..n {
                let v = d[i][j];
                if !v.is_finite() || v < 0.0 {
                    return Err(ClusterError::InvalidMatrix(format!("d[{i}][{j}] = {v}")));
                }
                if (v - d[j][i]).abs() > 1e-9 {
                    return Err(ClusterError::InvalidMatrix(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(DistanceMatrix { labels, d })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Fills a symmetric matrix from `f(i, j)` over the upper triangle.
pub(crate) fn symmetric<F>(n: usize, f: F) -> std::result::Result<Vec<Vec<f64>>, ClusterError>
where
    F: Fn(usize, usize) -> Result<f64> + Sync + Send,
{
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let values = par::map_slice(&pairs, |&(i, j)| f(i, j));
    let mut d = vec![vec![0.0; n]; n];
    for (&(i, j), v) in pairs.iter().zip(values) {
        let v = v?;
        d[i][j] = v;
        d[j][i] = v;
    }
    Ok(d)
}

fn emd(a: &[Point], b: &[Point]) -> Result<f64> {
    Ok(optimal_transport(a, b)?.cost)
}

/// Pairwise earth mover's distances (uniform weights, Euclidean cost).
pub fn emd_matrix(labels: Vec<String>, distributions: &[RunDistribution]) -> Result<DistanceMatrix> {
    if labels.len() != distributions.len() {
        return Err(ClusterError::InvalidParams("one label per distribution".into()));
    }
    if distributions.len() < 2 {
        return Err(ClusterError::TooFewEntities {
            found: distributions.len(),
            min: 2,
        });
    }
    emd_matrix_any(labels, distributions)
}

pub(crate) fn emd_matrix_any(labels: Vec<String>, distributions: &[RunDistribution]) -> Result<DistanceMatrix> {
    if let Some(i) = distributions.iter().position(RunDistribution::is_empty) {
        return Err(ClusterError::EmptyDistribution(labels[i].clone()));
    }
    let d = symmetric(distributions.len(), |i, j| emd(&distributions[i].points, &distributions[j].points))?;
    DistanceMatrix::new(labels, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterParams {
    pub min_cluster_size: usize,
    pub min_samples: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            min_cluster_size: 3,
            min_samples: 2,
        }
    }
}

impl ClusterParams {
    fn validate(&self) -> Result<()> {
        if self.min_cluster_size < 2 {
            return Err(ClusterError::InvalidParams("min_cluster_size must be at least 2".into()));
        }
        if self.min_samples == 0 {
            return Err(ClusterError::InvalidParams("min_samples must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub entities: Vec<String>,
    /// Cluster id per entity, `-1` for noise. Ids are dense from 0 and
    /// numbered by their lowest-index member.
    pub labels: Vec<i64>,
    /// The 2-D pre-embedding the density clustering ran on.
    pub coords: Vec<Point>,
    pub num_clusters: usize,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == cluster as i64).collect()
    }

    pub fn noise(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] < 0).collect()
    }
}

/// Classical MDS to 2-D, then HDBSCAN on the embedded points.
pub fn embed_cluster(d: &DistanceMatrix, params: &ClusterParams) -> Result<ClusterAssignment> {
    params.validate()?;
    let n = d.len();
    if n < params.min_cluster_size {
        return Err(ClusterError::TooFewEntities {
            found: n,
            min: params.min_cluster_size,
        });
    }
    let coords: Vec<Point> = classical_mds(&d.d, 2).into_iter().map(|r| [r[0], r[1]]).collect();
    let labels = hdbscan(&coords, params.min_cluster_size, params.min_samples.min(n));
    let num_clusters = labels.iter().copied().max().map_or(0, |m| (m + 1).max(0) as usize);
    Ok(ClusterAssignment {
        entities: d.labels.clone(),
        labels,
        coords,
        num_clusters,
    })
}

/// Adjusted Rand index between two labelings; noise (`-1`) counts as one
/// ordinary label. Identical trivial partitions score 1.
pub fn adjusted_rand_index(a: &[i64], b: &[i64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let c2 = |x: usize| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table = std::collections::BTreeMap::new();
    let mut ra = std::collections::BTreeMap::new();
    let mut rb = std::collections::BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_insert(0usize) += 1;
        *ra.entry(x).or_insert(0usize) += 1;
        *rb.entry(y).or_insert(0usize) += 1;
    }
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let total = c2(n);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// `1 - mean cos` over cells supported in both fields, skipping cells where
/// either vector is shorter than 1e-9.
pub fn field_distance(f1: &VectorField, f2: &VectorField) -> Result<f64> {
    if !f1.same_grid(f2) {
        return Err(CompareError::GridMismatch.into());
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..f1.vectors.len() {
        if !(f1.support_mask[i] && f2.support_mask[i]) {
            continue;
        }
        let (u, v) = (f1.vectors[i], f2.vectors[i]);
        let (nu, nv) = (u[0].hypot(u[1]), v[0].hypot(v[1]));
        if nu < 1e-9 || nv < 1e-9 {
            continue;
        }
        sum += ((u[0] * v[0] + u[1] * v[1]) / (nu * nv)).clamp(-1.0, 1.0);
        count += 1;
    }
    if count == 0 {
        return Err(ClusterError::NoJointSupport);
    }
    Ok(1.0 - sum / count as f64)
}
