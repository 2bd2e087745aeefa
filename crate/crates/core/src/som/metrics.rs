use serde::{Deserialize, Serialize};

use super::{best_two, Result, SomError, SomGrid};
use crate::data::SampleMatrix;
use crate::par;

/// Fit and topology quality of a trained grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SomMetrics {
    /// Mean distance from each sample to its BMU.
    pub quantization_error: f64,
    /// Fraction of samples whose first and second BMUs are not 4-adjacent.
    pub topographic_error: f64,
    /// `1 − Σ‖x − w_bmu‖² / Σ‖x − x̄‖²`.
    pub explained_variance: f64,
    /// Mean over nodes of the average weight distance to existing 4-neighbours.
    pub mean_smoothness: f64,
}

/// Average weight-space distance from node `k` to its existing 4-neighbours.
pub fn local_smoothness(grid: &SomGrid, k: usize) -> f64 {
    let w = grid.node(k);
    let (sum, count) = grid.neighbors4(k).fold((0.0, 0usize), |(s, c), nb| {
        let d2: f64 = w
            .iter()
            .zip(grid.node(nb))
            .map(|(a, b)| {
                let d = *a as f64 - *b as f64;
                d * d
            })
            .sum();
        (s + d2.sqrt(), c + 1)
    });
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

pub fn mean_smoothness(grid: &SomGrid) -> f64 {
    let n = grid.num_nodes();
    (0..n).map(|k| local_smoothness(grid, k)).sum::<f64>() / n as f64
}

pub fn metrics(grid: &SomGrid, samples: &SampleMatrix<'_>) -> Result<SomMetrics> {
    if samples.is_empty() {
        return Err(SomError::EmptySamples);
    }
    if samples.dim() != grid.dim {
        return Err(SomError::DimensionMismatch {
            expected: grid.dim,
            found: samples.dim(),
        });
    }
    let n = samples.len();
    let per_sample = par::map_range(n, |i| {
        let d2 = grid.sq_distances(samples.row(i));
        let m = best_two(&d2);
        let topo_err = m.second.is_some_and(|s| !grid.are_adjacent4(m.best, s));
        (m.distance, topo_err)
    });

    let mut mean = vec![0.0; samples.dim()];
    for row in samples.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let total_ss: f64 = samples
        .rows()
        .map(|row| row.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum::<f64>())
        .sum();
    if total_ss == 0.0 {
        return Err(SomError::ZeroVariance);
    }

    let qe = per_sample.iter().map(|(d, _)| d).sum::<f64>() / n as f64;
    let sse: f64 = per_sample.iter().map(|(d, _)| d * d).sum();
    let te = per_sample.iter().filter(|(_, e)| *e).count() as f64 / n as f64;
    Ok(SomMetrics {
        quantization_error: qe,
        topographic_error: te,
        explained_variance: 1.0 - sse / total_ss,
        mean_smoothness: mean_smoothness(grid),
    })
}
