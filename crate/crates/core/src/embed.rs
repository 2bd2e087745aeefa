//! Anchored minimum-distortion layout of SOM nodes in the plane.
//!
//! The distortion is the quadratic stress `Σ (‖x_a − x_b‖ − d_ab)²` over the
//! 4-adjacency edges of the lattice. Anchored nodes are hard constraints: their
//! gradient is projected out so they never move.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, Point};
use crate::som::SomGrid;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("node graph is disconnected")]
    Disconnected,
    #[error("node {node} out of range for {num_nodes} nodes")]
    NodeOutOfRange { node: usize, num_nodes: usize },
    #[error("initial layout has {found} positions for {expected} nodes")]
    InitLength { expected: usize, found: usize },
    #[error("non-finite anchor or initial position")]
    NonFinite,
    #[error("optimization cancelled")]
    Cancelled,
}

pub type Result<T> = std::result::Result<T, EmbedError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub target: f64,
}

/// Distortion graph over the nodes plus a fallback starting layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeGraph {
    pub num_nodes: usize,
    pub edges: Vec<Edge>,
    /// Layout used when no initial positions are given. Lattice coordinates
    /// for SOM graphs, a unit circle otherwise.
    pub default_layout: Vec<Point>,
}

impl NodeGraph {
    pub fn new(num_nodes: usize, edges: Vec<Edge>) -> Self {
        let default_layout = (0..num_nodes)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / num_nodes as f64;
                [a.cos(), a.sin()]
            })
            .collect();
        NodeGraph {
            num_nodes,
            edges,
            default_layout,
        }
    }

    pub fn is_connected(&self) -> bool {
        if self.num_nodes == 0 {
            return true;
        }
        let mut adj = vec![Vec::new(); self.num_nodes];
        for e in &self.edges {
            adj[e.a].push(e.b);
            adj[e.b].push(e.a);
        }
        let mut seen = vec![false; self.num_nodes];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Distortion of a layout.
    pub fn objective(&self, x: &[Point]) -> f64 {
        self.edges
            .iter()
            .map(|e| {
                let r = (x[e.a][0] - x[e.b][0]).hypot(x[e.a][1] - x[e.b][1]);
                (r - e.target) * (r - e.target)
            })
            .sum()
    }

    fn gradient(&self, x: &[Point], grad: &mut [Point]) {
        grad.iter_mut().for_each(|g| *g = [0.0, 0.0]);
        for e in &self.edges {
            let dx = x[e.a][0] - x[e.b][0];
            let dy = x[e.a][1] - x[e.b][1];
            let r = dx.hypot(dy);
            if r == 0.0 {
                continue;
            }
            let s = 2.0 * (r - e.target) / r;
            grad[e.a][0] += s * dx;
            grad[e.a][1] += s * dy;
            grad[e.b][0] -= s * dx;
            grad[e.b][1] -= s * dy;
        }
    }

    /// Per-node 2×2 Hessian blocks of the objective with the negative-curvature
    /// part (edges shorter than their target) clipped, stored as `[xx, xy, yy]`.
    fn hessian_blocks(&self, x: &[Point], blocks: &mut [[f64; 3]]) {
        blocks.iter_mut().for_each(|b| *b = [0.0; 3]);
        for e in &self.edges {
            let dx = x[e.a][0] - x[e.b][0];
            let dy = x[e.a][1] - x[e.b][1];
            let r = dx.hypot(dy);
            let h = if r == 0.0 {
                [2.0, 0.0, 2.0]
            } else {
                let (ux, uy) = (dx / r, dy / r);
                let t = ((r - e.target) / r).max(0.0);
                [
                    2.0 * (ux * ux + t * (1.0 - ux * ux)),
                    2.0 * (1.0 - t) * ux * uy,
                    2.0 * (uy * uy + t * (1.0 - uy * uy)),
                ]
            };
            for k in [e.a, e.b] {
                for i in 0..3 {
                    blocks[k][i] += h[i];
                }
            }
        }
    }
}

/// One edge per 4-adjacent lattice pair, targets equal to weight-space
/// distances rescaled so the median edge target is 1 (skipped when the
/// median is 0).
pub fn build_node_graph(grid: &SomGrid) -> NodeGraph {
    let (rows, cols) = (grid.rows(), grid.cols());
    let dist = |a: usize, b: usize| -> f64 {
        grid.node(a)
            .iter()
            .zip(grid.node(b))
            .map(|(x, y)| {
                let d = *x as f64 - *y as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut edges = Vec::with_capacity(2 * rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let k = i * cols + j;
            if j + 1 < cols {
                edges.push(Edge {
                    a: k,
                    b: k + 1,
                    target: dist(k, k + 1),
                });
            }
            if i + 1 < rows {
                edges.push(Edge {
                    a: k,
                    b: k + cols,
                    target: dist(k, k + cols),
                });
            }
        }
    }
    let mut sorted: Vec<f64> = edges.iter().map(|e| e.target).collect();
    sorted.sort_by(f64::total_cmp);
    let median = match sorted.len() {
        0 => 0.0,
        n if n % 2 == 1 => sorted[n / 2],
        n => 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]),
    };
    if median > 0.0 {
        edges.iter_mut().for_each(|e| e.target /= median);
    }
    let default_layout = (0..rows * cols)
        .map(|k| [(k % cols) as f64, (k / cols) as f64])
        .collect();
    NodeGraph {
        num_nodes: rows * cols,
        edges,
        default_layout,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdeConfig {
    /// First trial step along the preconditioned descent direction.
    pub initial_step: f64,
    pub max_iterations: usize,
    /// Stop once the relative objective decrease of a step drops below this.
    pub tolerance: f64,
}

impl Default for MdeConfig {
    fn default() -> Self {
        MdeConfig {
            initial_step: 1.0,
            max_iterations: 5000,
            tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedStatus {
    Converged,
    MaxIterations,
    /// The objective is positive but cannot decrease, e.g. every node is
    /// anchored.
    Stalled,
}

/// 2-D positions of the SOM nodes (the adjusted node space).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub positions: Vec<Point>,
    pub anchors: BTreeMap<usize, Point>,
    pub graph: NodeGraph,
    pub config: MdeConfig,
    pub status: EmbedStatus,
    pub objective: f64,
    pub iterations: usize,
    /// Objective after every accepted step, starting with the initial layout.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl Embedding {
    pub fn num_nodes(&self) -> usize {
        self.positions.len()
    }

    pub fn bbox(&self) -> BBox {
        BBox::of_points(&self.positions).expect("embedding has nodes")
    }

    fn check_node(&self, node: usize) -> Result<()> {
        if node >= self.num_nodes() {
            return Err(EmbedError::NodeOutOfRange {
                node,
                num_nodes: self.num_nodes(),
            });
        }
        Ok(())
    }

    /// Edits the anchor map without re-optimizing.
    pub fn set_anchor(&mut self, node: usize, position: Option<Point>) -> Result<()> {
        self.check_node(node)?;
        match position {
            Some(p) => {
                if !(p[0].is_finite() && p[1].is_finite()) {
                    return Err(EmbedError::NonFinite);
                }
                self.anchors.insert(node, p);
            }
            None => {
                self.anchors.remove(&node);
            }
        }
        Ok(())
    }
}

fn center(x: &mut [Point]) {
    let n = x.len() as f64;
    let cx = x.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = x.iter().map(|p| p[1]).sum::<f64>() / n;
    x.iter_mut().for_each(|p| {
        p[0] -= cx;
        p[1] -= cy;
    });
}

fn unit_rms(mut x: Vec<Point>) -> Vec<Point> {
    center(&mut x);
    let rms = (x.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>() / x.len() as f64).sqrt();
    if rms > 0.0 {
        x.iter_mut().for_each(|p| {
            p[0] /= rms;
            p[1] /= rms;
        });
    }
    x
}

/// Descent with Armijo backtracking along the block-Jacobi preconditioned
/// gradient, from `init` (default: the graph's
/// layout scaled to unit RMS radius). Without anchors the result is centred
/// at the origin.
pub fn mde_project(
    graph: &NodeGraph,
    anchors: &BTreeMap<usize, Point>,
    init: Option<&[Point]>,
    config: &MdeConfig,
    cancel: Option<&dyn Fn() -> bool>,
) -> Result<Embedding> {
    let n = graph.num_nodes;
    if let Some(&node) = anchors.keys().find(|&&k| k >= n) {
        return Err(EmbedError::NodeOutOfRange { node, num_nodes: n });
    }
    if anchors.values().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(EmbedError::NonFinite);
    }
    if !graph.is_connected() {
        return Err(EmbedError::Disconnected);
    }
    let mut x: Vec<Point> = match init {
        Some(p) if p.len() != n => {
            return Err(EmbedError::InitLength {
                expected: n,
                found: p.len(),
            })
        }
        Some(p) => p.to_vec(),
        None => unit_rms(graph.default_layout.clone()),
    };
    if x.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
        return Err(EmbedError::NonFinite);
    }
    for (&k, &p) in anchors {
        x[k] = p;
    }
    let free: Vec<bool> = (0..n).map(|k| !anchors.contains_key(&k)).collect();

    let mut f = graph.objective(&x);
    let mut trace = vec![f];
    let mut status = EmbedStatus::MaxIterations;
    let mut iterations = 0;
    let mut step = config.initial_step;
    let mut grad = vec![[0.0; 2]; n];
    let mut blocks = vec![[0.0; 3]; n];
    let mut trial = x.clone();

    if free.iter().all(|f| !f) {
        status = if f > 0.0 {
            EmbedStatus::Stalled
        } else {
            EmbedStatus::Converged
        };
    } else {
        while iterations < config.max_iterations {
            if cancel.is_some_and(|c| c()) {
                return Err(EmbedError::Cancelled);
            }
            graph.gradient(&x, &mut grad);
            graph.hessian_blocks(&x, &mut blocks);
            // block-Jacobi preconditioned direction; anchored nodes stay put
            let mut slope = 0.0;
            for k in 0..n {
                if !free[k] {
                    grad[k] = [0.0, 0.0];
                    continue;
                }
                let [a, b, c] = blocks[k];
                let mu = 1e-9 * (a + c) + f64::MIN_POSITIVE;
                let (a, c) = (a + mu, c + mu);
                let det = a * c - b * b;
                let g = grad[k];
                grad[k] = [(c * g[0] - b * g[1]) / det, (a * g[1] - b * g[0]) / det];
                slope += g[0] * grad[k][0] + g[1] * grad[k][1];
            }
            if !(slope > 0.0) {
                status = EmbedStatus::Converged;
                break;
            }
            // Armijo backtracking
            let mut accepted = None;
            while step > 1e-18 {
                for k in 0..n {
                    trial[k] = [x[k][0] - step * grad[k][0], x[k][1] - step * grad[k][1]];
                }
                let ft = graph.objective(&trial);
                if ft <= f - 1e-4 * step * slope {
                    accepted = Some(ft);
                    break;
                }
                step *= 0.5;
            }
            iterations += 1;
            let Some(f_new) = accepted else {
                status = EmbedStatus::Converged;
                break;
            };
            std::mem::swap(&mut x, &mut trial);
            let decrease = (f - f_new) / f.max(f64::MIN_POSITIVE);
            f = f_new;
            trace.push(f);
            step = (step * 2.0).min(1.0);
            if decrease < config.tolerance {
                status = EmbedStatus::Converged;
                break;
            }
        }
    }

    if anchors.is_empty() {
        center(&mut x);
    }
    Ok(Embedding {
        positions: x,
        anchors: anchors.clone(),
        graph: graph.clone(),
        config: *config,
        status,
        objective: f,
        iterations,
        trace,
    })
}

/// Unanchored layout of a trained grid.
pub fn embed_grid(grid: &SomGrid, config: &MdeConfig) -> Result<Embedding> {
    mde_project(&build_node_graph(grid), &BTreeMap::new(), None, config, None)
}

/// Sets or clears one anchor and re-optimizes from the current positions.
pub fn update_anchor(
    embedding: &Embedding,
    node: usize,
    position: Option<Point>,
    cancel: Option<&dyn Fn() -> bool>,
) -> Result<Embedding> {
    let mut next = embedding.clone();
    next.set_anchor(node, position)?;
    reoptimize(&next, cancel)
}

/// Re-runs the optimizer warm-started from the embedding's own positions.
pub fn reoptimize(embedding: &Embedding, cancel: Option<&dyn Fn() -> bool>) -> Result<Embedding> {
    mde_project(
        &embedding.graph,
        &embedding.anchors,
        Some(&embedding.positions),
        &embedding.config,
        cancel,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::som::{SomConfig, SomGrid};

    fn scalar_grid(rows: usize, cols: usize, w: Vec<f32>) -> SomGrid {
        let c = SomConfig {
            rows,
            cols,
            ..Default::default()
        };
        SomGrid::from_weights(c, 1, w).unwrap()
    }

    fn chain() -> NodeGraph {
        NodeGraph::new(
            3,
            vec![
                Edge { a: 0, b: 1, target: 1.0 },
                Edge { a: 1, b: 2, target: 1.0 },
            ],
        )
    }

    #[test]
    fn three_by_three_has_twelve_edges() {
        let g = build_node_graph(&scalar_grid(3, 3, (0..9).map(|v| v as f32).collect()));
        assert_eq!(g.edges.len(), 12);
        assert!(g.is_connected());
    }

    #[test]
    fn constant_grid_keeps_zero_targets() {
        let g = build_node_graph(&scalar_grid(3, 3, vec![2.0; 9]));
        assert!(g.edges.iter().all(|e| e.target == 0.0));
    }

    #[test]
    fn median_rescaling_on_two_by_two() {
        let g = build_node_graph(&scalar_grid(2, 2, vec![0.0, 1.0, 2.0, 3.0]));
        let mut t: Vec<f64> = g.edges.iter().map(|e| e.target).collect();
        // raw targets: (0,1)=1, (0,2)=2, (1,3)=2, (2,3)=1
        let expected = [2.0 / 3.0, 4.0 / 3.0, 4.0 / 3.0, 2.0 / 3.0];
        for (a, b) in t.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        t.sort_by(f64::total_cmp);
        assert!((0.5 * (t[1] + t[2]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fully_anchored_returns_anchors() {
        let anchors: BTreeMap<usize, Point> =
            [(0, [0.0, 0.0]), (1, [5.0, 1.0]), (2, [-3.0, 2.5])].into();
        let e = mde_project(&chain(), &anchors, None, &MdeConfig::default(), None).unwrap();
        assert_eq!(e.iterations, 0);
        for (k, p) in &anchors {
            assert_eq!(e.positions[*k], *p);
        }
        assert_eq!(e.status, EmbedStatus::Stalled);
    }

    #[test]
    fn coincident_anchors_with_positive_targets_stall() {
        let anchors: BTreeMap<usize, Point> = (0..3).map(|k| (k, [1.0, 1.0])).collect();
        let e = mde_project(&chain(), &anchors, None, &MdeConfig::default(), None).unwrap();
        assert_eq!(e.status, EmbedStatus::Stalled);
        assert_eq!(e.objective, 2.0);
    }

    #[test]
    fn chain_middle_node_settles_between_anchors() {
        let anchors: BTreeMap<usize, Point> = [(0, [0.0, 0.0]), (2, [2.0, 0.0])].into();
        let e = mde_project(&chain(), &anchors, None, &MdeConfig::default(), None).unwrap();
        let m = e.positions[1];
        assert!((m[0] - 1.0).abs() < 1e-3 && m[1].abs() < 1e-3, "{m:?} {:?} {}", &e.trace[e.trace.len().saturating_sub(8)..], e.iterations);
        assert!(e.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let g = NodeGraph::new(3, vec![Edge { a: 0, b: 1, target: 1.0 }]);
        assert!(matches!(
            mde_project(&g, &BTreeMap::new(), None, &MdeConfig::default(), None),
            Err(EmbedError::Disconnected)
        ));
    }

    #[test]
    fn four_cycle_descends() {
        let edges = (0..4)
            .map(|k| Edge {
                a: k,
                b: (k + 1) % 4,
                target: 1.0,
            })
            .collect();
        let g = NodeGraph::new(4, edges);
        let init_obj = g.objective(&unit_rms(g.default_layout.clone()));
        let e = mde_project(&g, &BTreeMap::new(), None, &MdeConfig::default(), None).unwrap();
        assert!(e.objective <= init_obj);
        assert!(e.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(e.objective < 1e-6);
    }

    #[test]
    fn set_then_clear_restores_anchor_map() {
        let mut e = mde_project(&chain(), &BTreeMap::new(), None, &MdeConfig::default(), None)
            .unwrap();
        let before = e.anchors.clone();
        e.set_anchor(1, Some([0.3, 0.4])).unwrap();
        e.set_anchor(1, None).unwrap();
        assert_eq!(e.anchors, before);
        assert!(matches!(
            e.set_anchor(7, None),
            Err(EmbedError::NodeOutOfRange { node: 7, .. })
        ));
    }

    #[test]
    fn cancellation_aborts() {
        let stop = || true;
        let r = mde_project(
            &chain(),
            &BTreeMap::new(),
            None,
            &MdeConfig::default(),
            Some(&stop),
        );
        assert!(matches!(r, Err(EmbedError::Cancelled)));
    }
}
