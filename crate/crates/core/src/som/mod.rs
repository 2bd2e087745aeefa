//! Rectangular self-organizing map with a Gaussian neighbourhood whose width
//! shrinks linearly from `σ_initial = √(kR · rows · cols)` to
//! `σ_final = kS · σ_initial`.

mod checkpoint;
mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use metrics::{local_smoothness, mean_smoothness, metrics, SomMetrics};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SampleMatrix;
use crate::par;

#[derive(Debug, Error)]
pub enum SomError {
    #[error("invalid SOM config: {0}")]
    InvalidConfig(String),
    #[error("iteration {t} out of range for {iterations} iterations")]
    IterationOutOfRange { t: usize, iterations: usize },
    #[error("no samples")]
    EmptySamples,
    #[error("dimension mismatch: SOM has {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("samples are identical to their mean; explained variance undefined")]
    ZeroVariance,
    #[error("training cancelled")]
    Cancelled,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SomError>;

fn default_lr_initial() -> f64 {
    0.5
}

fn default_lr_final() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomConfig {
    pub rows: usize,
    pub cols: usize,
    /// Initial neighbourhood area ratio, `σ_initial² / (rows · cols)`.
    #[serde(rename = "kR")]
    pub k_r: f64,
    /// Final to initial sigma ratio.
    #[serde(rename = "kS")]
    pub k_s: f64,
    /// Online update steps; `None` means 20 passes over the samples.
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default = "default_lr_initial")]
    pub lr_initial: f64,
    #[serde(default = "default_lr_final")]
    pub lr_final: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SomConfig {
    fn default() -> Self {
        SomConfig {
            rows: 30,
            cols: 30,
            k_r: 0.03,
            k_s: 0.2,
            iterations: None,
            lr_initial: default_lr_initial(),
            lr_final: default_lr_final(),
            seed: 0,
        }
    }
}

impl SomConfig {
    pub fn square(dim: usize) -> Self {
        SomConfig {
            rows: dim,
            cols: dim,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SomError::InvalidConfig(m));
        if self.rows < 2 || self.cols < 2 {
            return bad(format!("lattice {}x{} must be at least 2x2", self.rows, self.cols));
        }
        if !(self.k_r > 0.0 && self.k_r.is_finite()) {
            return bad(format!("kR = {} must be positive", self.k_r));
        }
        if !(self.k_s > 0.0 && self.k_s <= 1.0) {
            return bad(format!("kS = {} must lie in (0, 1]", self.k_s));
        }
        if self.iterations == Some(0) {
            return bad("iterations must be at least 1".into());
        }
        if !(self.lr_initial > 0.0 && self.lr_final > 0.0) {
            return bad("learning rates must be positive".into());
        }
        Ok(())
    }

    pub fn sigma_initial(&self) -> f64 {
        (self.k_r * (self.rows * self.cols) as f64).sqrt()
    }

    pub fn sigma_final(&self) -> f64 {
        self.k_s * self.sigma_initial()
    }

    pub fn resolved_iterations(&self, num_samples: usize) -> usize {
        self.iterations.unwrap_or(20 * num_samples).max(1)
    }
}

fn lerp(a: f64, b: f64, t: usize, iterations: usize) -> f64 {
    if iterations <= 1 {
        return a;
    }
    if t == iterations - 1 {
        return b;
    }
    a + (b - a) * t as f64 / (iterations - 1) as f64
}

/// Neighbourhood width at step `t` of an `iterations`-step run.
pub fn sigma_schedule(config: &SomConfig, iterations: usize, t: usize) -> Result<f64> {
    if t >= iterations {
        return Err(SomError::IterationOutOfRange { t, iterations });
    }
    Ok(lerp(config.sigma_initial(), config.sigma_final(), t, iterations))
}

/// Learning rate at step `t`, decaying linearly.
pub fn learning_rate(config: &SomConfig, iterations: usize, t: usize) -> f64 {
    lerp(config.lr_initial, config.lr_final, t, iterations)
}

/// Trained lattice. Node `k` sits at lattice position `(k / cols, k % cols)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SomGrid {
    pub config: SomConfig,
    pub dim: usize,
    weights: Vec<f32>,
}

/// Result of a best-matching-unit search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BmuMatch {
    pub best: usize,
    pub second: Option<usize>,
    /// Euclidean distance to the best node.
    pub distance: f64,
}

impl SomGrid {
    /// Wraps explicit node-major weights. Lattice sizes of 1 are allowed here
    /// so tiny hand-built grids can be evaluated.
    pub fn from_weights(config: SomConfig, dim: usize, weights: Vec<f32>) -> Result<Self> {
        if config.rows == 0 || config.cols == 0 || dim == 0 {
            return Err(SomError::InvalidConfig("empty grid".into()));
        }
        if weights.len() != config.rows * config.cols * dim {
            return Err(SomError::DimensionMismatch {
                expected: config.rows * config.cols * dim,
                found: weights.len(),
            });
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(SomError::InvalidConfig("non-finite weight".into()));
        }
        Ok(SomGrid {
            config,
            dim,
            weights,
        })
    }

    pub fn rows(&self) -> usize {
        self.config.rows
    }

    pub fn cols(&self) -> usize {
        self.config.cols
    }

    pub fn num_nodes(&self) -> usize {
        self.config.rows * self.config.cols
    }

    pub fn node(&self, k: usize) -> &[f32] {
        &self.weights[k * self.dim..(k + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    /// Lattice coordinates `(i, j)` = (row, column) of node `k`.
    pub fn grid_coords(&self, k: usize) -> (usize, usize) {
        (k / self.cols(), k % self.cols())
    }

    pub fn node_at(&self, i: usize, j: usize) -> usize {
        i * self.cols() + j
    }

    /// Indices of the existing 4-neighbours of node `k`.
    pub fn neighbors4(&self, k: usize) -> impl Iterator<Item = usize> + '_ {
        let (i, j) = self.grid_coords(k);
        let (r, c) = (self.rows(), self.cols());
        [
            (i > 0).then(|| k - c),
            (i + 1 < r).then(|| k + c),
            (j > 0).then(|| k - 1),
            (j + 1 < c).then(|| k + 1),
        ]
        .into_iter()
        .flatten()
    }

    pub fn are_adjacent4(&self, a: usize, b: usize) -> bool {
        let (ai, aj) = self.grid_coords(a);
        let (bi, bj) = self.grid_coords(b);
        ai.abs_diff(bi) + aj.abs_diff(bj) == 1
    }

    /// Squared distance from `x` to every node, in node order.
    fn sq_distances(&self, x: &[f64]) -> Vec<f64> {
        let n = self.num_nodes();
        let dist = |k: usize| sq_dist(x, self.node(k));
        if n * self.dim >= PAR_THRESHOLD {
            par::map_range(n, dist)
        } else {
            (0..n).map(dist).collect()
        }
    }

    /// Nearest and second-nearest nodes; ties go to the lower index.
    pub fn bmu(&self, x: &[f64]) -> Result<BmuMatch> {
        if x.len() != self.dim {
            return Err(SomError::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(best_two(&self.sq_distances(x)))
    }
}

/// Below this many weight entries the per-step work stays on one thread.
const PAR_THRESHOLD: usize = 1 << 16;

pub(crate) fn sq_dist(x: &[f64], w: &[f32]) -> f64 {
    x.iter()
        .zip(w)
        .map(|(a, b)| {
            let d = a - *b as f64;
            d * d
        })
        .sum()
}

fn best_two(d2: &[f64]) -> BmuMatch {
    let mut best = 0;
    let mut second: Option<usize> = None;
    for k in 1..d2.len() {
        if d2[k] < d2[best] {
            second = Some(best);
            best = k;
        } else if second.is_none_or(|s| d2[k] < d2[s]) {
            second = Some(k);
        }
    }
    BmuMatch {
        best,
        second,
        distance: d2[best].sqrt(),
    }
}

/// Snapshot handed to the training observer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainProgress {
    pub iteration: usize,
    pub iterations: usize,
    pub sigma: f64,
    /// Quantization error over a fixed subsample of at most 256 rows.
    pub quantization_error: f64,
}

/// Observer callback; returning `false` cancels training.
pub type Observer<'o> = &'o mut dyn FnMut(&TrainProgress) -> bool;

/// Online Kohonen training.
///
/// Each step draws the next sample of a seeded per-epoch shuffle, finds its
/// BMU and pulls every node towards it by
/// `lr(t) · exp(−d² / 2σ(t)²)`, with `d` the Euclidean lattice distance.
pub fn train_som(
    samples: &SampleMatrix<'_>,
    config: &SomConfig,
    mut progress: Option<Observer<'_>>,
) -> Result<SomGrid> {
    config.validate()?;
    if samples.is_empty() {
        return Err(SomError::EmptySamples);
    }
    let dim = samples.dim();
    if dim == 0 {
        return Err(SomError::DimensionMismatch {
            expected: 1,
            found: 0,
        });
    }
    let n = samples.len();
    let iterations = config.resolved_iterations(n);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut lo = samples.row(0).to_vec();
    let mut hi = lo.clone();
    for row in samples.rows() {
        for (d, &v) in row.iter().enumerate() {
            lo[d] = lo[d].min(v);
            hi[d] = hi[d].max(v);
        }
    }
    let nodes = config.rows * config.cols;
    let mut weights = Vec::with_capacity(nodes * dim);
    for _ in 0..nodes {
        for d in 0..dim {
            let w = if hi[d] > lo[d] {
                rng.random_range(lo[d]..hi[d])
            } else {
                lo[d]
            };
            weights.push(w as f32);
        }
    }
    let mut grid = SomGrid {
        config: config.clone(),
        dim,
        weights,
    };

    let probe: Vec<usize> = {
        let step = n.div_ceil(256).max(1);
        (0..n).step_by(step).collect()
    };
    let report_every = (iterations / 100).max(1);
    let cols = config.cols;
    let mut order: Vec<usize> = (0..n).collect();

    for t in 0..iterations {
        if t % n == 0 {
            order.shuffle(&mut rng);
        }
        let x = samples.row(order[t % n]);
        let bmu = best_two(&grid.sq_distances(x)).best;
        let sigma = sigma_schedule(config, iterations, t)?;
        let lr = learning_rate(config, iterations, t);
        let (bi, bj) = (bmu / cols, bmu % cols);
        let two_s2 = 2.0 * sigma * sigma;
        let update = |k: usize, w: &mut [f32]| {
            let (i, j) = (k / cols, k % cols);
            let di = i as f64 - bi as f64;
            let dj = j as f64 - bj as f64;
            let rate = lr * (-(di * di + dj * dj) / two_s2).exp();
            if rate < 1e-9 {
                return;
            }
            for (wv, &xv) in w.iter_mut().zip(x) {
                let cur = *wv as f64;
                *wv = (cur + rate * (xv - cur)) as f32;
            }
        };
        if nodes * dim >= PAR_THRESHOLD {
            par::for_each_chunk_mut(&mut grid.weights, dim, update);
        } else {
            grid.weights
                .chunks_mut(dim)
                .enumerate()
                .for_each(|(k, w)| update(k, w));
        }

        if let Some(obs) = progress.as_mut() {
            if t % report_every == 0 || t + 1 == iterations {
                let qe = probe
                    .iter()
                    .map(|&r| best_two(&grid.sq_distances(samples.row(r))).distance)
                    .sum::<f64>()
                    / probe.len() as f64;
                let p = TrainProgress {
                    iteration: t + 1,
                    iterations,
                    sigma,
                    quantization_error: qe,
                };
                if !obs(&p) {
                    return Err(SomError::Cancelled);
                }
            }
        }
    }
    Ok(grid)
}
