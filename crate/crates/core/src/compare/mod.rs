//! Pairwise comparison of run distributions: shared-box KDEs, bootstrap
//! transport vector fields, and annotation-to-annotation transitions.

mod ot;

pub use ot::{
    hungarian, min_cost_transport, optimal_transport, optimal_transport_with, GroundCost, TransportPair,
    TransportPlan,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::Annotation;
use crate::distribution::{kde, kde_box, DistError, KdeParams, KdeResult};
use crate::geometry::{BBox, Point, Polygon};
use crate::par;

#[derive(Debug, Error)]
pub enum CompareError {
    #[error("empty point set")]
    EmptySet,
    #[error("degenerate distribution: {0}")]
    Degenerate(String),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("vector fields do not share a grid")]
    GridMismatch,
    #[error(transparent)]
    Dist(#[from] DistError),
}

pub type Result<T> = std::result::Result<T, CompareError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapParams {
    /// Number of bootstrap replicates.
    pub k: usize,
    /// Field resolution per axis.
    pub n: usize,
    pub seed: u64,
    pub ground: GroundCost,
}

fn default_ground() -> GroundCost {
    GroundCost::SquaredEuclidean
}

impl Default for BootstrapParams {
    fn default() -> Self {
        BootstrapParams {
            k: 20,
            n: 16,
            seed: 0,
            ground: default_ground(),
        }
    }
}

impl BootstrapParams {
    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(CompareError::InvalidParams("k must be at least 1".into()));
        }
        if self.n == 0 {
            return Err(CompareError::InvalidParams("n must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorField {
    pub bbox: BBox,
    pub n: usize,
    /// Row-major `n × n`; row 0 is the lowest `y`.
    pub vectors: Vec<[f64; 2]>,
    pub support_mask: Vec<bool>,
}

impl VectorField {
    pub fn cell_size(&self) -> [f64; 2] {
        [self.bbox.width() / self.n as f64, self.bbox.height() / self.n as f64]
    }

    pub fn cell_center(&self, idx: usize) -> Point {
        let c = self.cell_size();
        let (r, col) = (idx / self.n, idx % self.n);
        [
            self.bbox.min[0] + (col as f64 + 0.5) * c[0],
            self.bbox.min[1] + (r as f64 + 0.5) * c[1],
        ]
    }

    pub fn supported(&self) -> impl Iterator<Item = (usize, [f64; 2])> + '_ {
        self.vectors
            .iter()
            .zip(&self.support_mask)
            .enumerate()
            .filter(|(_, (_, &s))| s)
            .map(|(i, (v, _))| (i, *v))
    }

    /// Mean vector over supported cells.
    pub fn mean_supported(&self) -> Option<[f64; 2]> {
        let (mut s, mut c) = ([0.0, 0.0], 0usize);
        for (_, v) in self.supported() {
            s[0] += v[0];
            s[1] += v[1];
            c += 1;
        }
        (c > 0).then(|| [s[0] / c as f64, s[1] / c as f64])
    }

    pub fn max_supported_magnitude(&self) -> f64 {
        self.supported().map(|(_, v)| v[0].hypot(v[1])).fold(0.0, f64::max)
    }

    pub fn same_grid(&self, other: &VectorField) -> bool {
        self.n == other.n && self.bbox == other.bbox
    }
}

fn check_distribution(points: &[Point], which: &str) -> Result<()> {
    if points.len() < 2 {
        return Err(CompareError::Degenerate(format!("{which} has fewer than 2 points")));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(CompareError::NonFinite);
    }
    Ok(())
}

/// RNG of replicate `i`: the base seed with the replicate index as stream.
pub fn replicate_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

fn resample(points: &[Point], rng: &mut ChaCha8Rng) -> Vec<Point> {
    (0..points.len()).map(|_| points[rng.random_range(0..points.len())]).collect()
}

/// One replicate's transport: resample both sides to their own sizes and
/// solve the plan between the resamples.
fn bootstrap_plan(
    r1: &[Point],
    r2: &[Point],
    params: &BootstrapParams,
    i: usize,
) -> Result<(Vec<Point>, Vec<Point>, TransportPlan)> {
    let mut rng = replicate_rng(params.seed, i);
    let a = resample(r1, &mut rng);
    let b = resample(r2, &mut rng);
    let plan = optimal_transport_with(&a, &b, params.ground)?;
    Ok((a, b, plan))
}

/// Mass-weighted mean displacement per distinct source position.
fn source_displacements(a: &[Point], b: &[Point], plan: &TransportPlan) -> Vec<(Point, [f64; 2])> {
    let mut acc: Vec<(Point, [f64; 3])> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for p in &plan.pairs {
        let s = a[p.source];
        let key = (s[0].to_bits(), s[1].to_bits());
        let slot = *index.entry(key).or_insert_with(|| {
            acc.push((s, [0.0; 3]));
            acc.len() - 1
        });
        let t = b[p.target];
        let e = &mut acc[slot].1;
        e[0] += p.mass * (t[0] - s[0]);
        e[1] += p.mass * (t[1] - s[1]);
        e[2] += p.mass;
    }
    acc.into_iter().map(|(s, e)| (s, [e[0] / e[2], e[1] / e[2]])).collect()
}

/// Inverse-distance-squared interpolation onto cell centres, ignoring
/// samples farther than `radius`. Cells with no sample in range are masked.
fn idw_grid(samples: &[(Point, [f64; 2])], bbox: &BBox, n: usize, radius: f64) -> (Vec<[f64; 2]>, Vec<bool>) {
    let cw = bbox.width() / n as f64;
    let ch = bbox.height() / n as f64;
    let mut vectors = vec![[0.0; 2]; n * n];
    let mut mask = vec![false; n * n];
    for idx in 0..n * n {
        let c = [
            bbox.min[0] + ((idx % n) as f64 + 0.5) * cw,
            bbox.min[1] + ((idx / n) as f64 + 0.5) * ch,
        ];
        let (mut w_sum, mut v) = (0.0, [0.0, 0.0]);
        let mut exact = None;
        for (p, d) in samples {
            let r = (p[0] - c[0]).hypot(p[1] - c[1]);
            if r > radius {
                continue;
            }
            if r == 0.0 {
                exact = Some(*d);
                break;
            }
            let w = 1.0 / (r * r);
            w_sum += w;
            v[0] += w * d[0];
            v[1] += w * d[1];
        }
        if let Some(d) = exact {
            vectors[idx] = d;
            mask[idx] = true;
        } else if w_sum > 0.0 {
            vectors[idx] = [v[0] / w_sum, v[1] / w_sum];
            mask[idx] = true;
        }
    }
    (vectors, mask)
}

/// Bootstrap transport field from `r1` to `r2` on an `n × n` grid over
/// `bbox` (default: joint bounding box of both distributions).
///
/// Each replicate resamples both sides, solves the transport, averages the
/// displacement of every source position and interpolates it onto the grid
/// with a cutoff of two cells. A cell's final vector is the mean over the
/// replicates that support it.
pub fn bootstrap_vector_field(
    r1: &[Point],
    r2: &[Point],
    params: &BootstrapParams,
    bbox: Option<BBox>,
) -> Result<VectorField> {
    params.validate()?;
    check_distribution(r1, "first distribution")?;
    check_distribution(r2, "second distribution")?;
    let bbox = match bbox {
        Some(b) => b,
        None => BBox::of_points(r1.iter().chain(r2)).unwrap(),
    };
    if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(CompareError::Degenerate("bounding box has zero extent".into()));
    }
    let n = params.n;
    let radius = 2.0 * (bbox.width() / n as f64).max(bbox.height() / n as f64);
    let replicates = par::map_range(params.k, |i| {
        let (a, b, plan) = bootstrap_plan(r1, r2, params, i)?;
        Ok::<_, CompareError>(idw_grid(&source_displacements(&a, &b, &plan), &bbox, n, radius))
    });
    let mut sum = vec![[0.0; 2]; n * n];
    let mut count = vec![0usize; n * n];
    for rep in replicates {
        let (v, m) = rep?;
        for idx in 0..n * n {
            if m[idx] {
                sum[idx][0] += v[idx][0];
                sum[idx][1] += v[idx][1];
                count[idx] += 1;
            }
        }
    }
    let vectors = sum
        .iter()
        .zip(&count)
        .map(|(s, &c)| if c > 0 { [s[0] / c as f64, s[1] / c as f64] } else { [0.0, 0.0] })
        .collect();
    Ok(VectorField {
        bbox,
        n,
        vectors,
        support_mask: count.iter().map(|&c| c > 0).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRegion {
    /// Annotation id, `None` for the unannotated remainder.
    pub id: Option<u64>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    /// Annotations by creation order, then "unannotated".
    pub regions: Vec<TransitionRegion>,
    /// `flows[s][t]`: share of mass moving from region `s` to region `t`.
    pub flows: Vec<Vec<f64>>,
    pub source_totals: Vec<f64>,
}

/// Region index of a point: the lowest-`created_order` containing annotation,
/// else the trailing "unannotated" slot.
fn classify(p: &Point, polys: &[Polygon]) -> usize {
    polys.iter().position(|poly| poly.contains(p)).unwrap_or(polys.len())
}

pub fn transition_matrix(
    r1: &[Point],
    r2: &[Point],
    annotations: &[Annotation],
    params: &BootstrapParams,
) -> Result<TransitionMatrix> {
    params.validate()?;
    check_distribution(r1, "first distribution")?;
    check_distribution(r2, "second distribution")?;
    let mut ordered: Vec<&Annotation> = annotations.iter().collect();
    ordered.sort_by_key(|a| (a.created_order, a.id));
    let polys: Vec<Polygon> = ordered.iter().map(|a| a.polygon()).collect();
    let r = polys.len() + 1;
    let replicates = par::map_range(params.k, |i| {
        let (a, b, plan) = bootstrap_plan(r1, r2, params, i)?;
        let ca: Vec<usize> = a.iter().map(|p| classify(p, &polys)).collect();
        let cb: Vec<usize> = b.iter().map(|p| classify(p, &polys)).collect();
        let mut m = vec![0.0; r * r];
        for p in &plan.pairs {
            m[ca[p.source] * r + cb[p.target]] += p.mass;
        }
        Ok::<_, CompareError>(m)
    });
    let mut total = vec![0.0; r * r];
    for rep in replicates {
        for (t, v) in total.iter_mut().zip(rep?) {
            *t += v;
        }
    }
    let mass: f64 = total.iter().sum();
    let flows: Vec<Vec<f64>> = total.chunks(r).map(|row| row.iter().map(|v| v / mass).collect()).collect();
    let mut regions: Vec<TransitionRegion> = ordered
        .iter()
        .map(|a| TransitionRegion {
            id: Some(a.id),
            label: a.label.clone(),
        })
        .collect();
    regions.push(TransitionRegion {
        id: None,
        label: "unannotated".into(),
    });
    Ok(TransitionMatrix {
        regions,
        source_totals: flows.iter().map(|row| row.iter().sum()).collect(),
        flows,
    })
}

/// Both KDEs on one grid over the union of their padded boxes.
pub fn side_by_side(r1: &[Point], r2: &[Point], params: &KdeParams) -> Result<(KdeResult, KdeResult)> {
    let shared = kde_box(r1, params)?.union(&kde_box(r2, params)?);
    Ok((kde(r1, params, Some(shared))?, kde(r2, params, Some(shared))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lattice(n: usize, step: f64) -> Vec<Point> {
        (0..n * n).map(|i| [(i % n) as f64 * step, (i / n) as f64 * step]).collect()
    }

    #[test]
    fn translation_is_recovered() {
        let r1 = lattice(12, 0.25);
        let r2: Vec<Point> = r1.iter().map(|p| [p[0] + 1.0, p[1]]).collect();
        let f = bootstrap_vector_field(&r1, &r2, &BootstrapParams { k: 20, n: 16, seed: 3, ..Default::default() }, None).unwrap();
        let m = f.mean_supported().unwrap();
        assert!((m[0] - 1.0).abs() < 0.1 && m[1].abs() < 0.1, "{m:?}");
        for (v, &s) in f.vectors.iter().zip(&f.support_mask) {
            if !s {
                assert_eq!(*v, [0.0, 0.0]);
            }
        }
    }

    #[test]
    fn field_is_reproducible() {
        let r1 = lattice(5, 1.0);
        let r2: Vec<Point> = r1.iter().map(|p| [p[1], p[0] + 0.5]).collect();
        let p = BootstrapParams { k: 1, n: 8, seed: 9, ..Default::default() };
        assert_eq!(
            bootstrap_vector_field(&r1, &r2, &p, None).unwrap(),
            bootstrap_vector_field(&r1, &r2, &p, None).unwrap()
        );
    }

    fn square(id: u64, order: u64, x0: f64, x1: f64) -> Annotation {
        Annotation::new(id, format!("r{id}"), vec![[x0, -100.0], [x1, -100.0], [x1, 100.0], [x0, 100.0]], order).unwrap()
    }

    #[test]
    fn transitions_between_disjoint_annotations() {
        let r1 = lattice(4, 0.1);
        let r2: Vec<Point> = r1.iter().map(|p| [p[0] + 10.0, p[1]]).collect();
        let anns = [square(7, 1, 9.0, 20.0), square(3, 0, -1.0, 1.0)];
        let t = transition_matrix(&r1, &r2, &anns, &BootstrapParams { k: 3, n: 4, seed: 0, ..Default::default() }).unwrap();
        assert_eq!(t.regions[0].id, Some(3));
        assert!((t.flows[0][1] - 1.0).abs() < 1e-12);
        let all = [square(1, 0, -100.0, 100.0)];
        let t = transition_matrix(&r1, &r2, &all, &BootstrapParams { k: 2, n: 4, seed: 0, ..Default::default() }).unwrap();
        assert!((t.flows[0][0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn side_by_side_shares_the_box() {
        let r1 = lattice(4, 1.0);
        let r2: Vec<Point> = r1.iter().map(|p| [p[0] + 8.0, p[1]]).collect();
        let p = KdeParams { grid: 32, ..Default::default() };
        let (a, b) = side_by_side(&r1, &r2, &p).unwrap();
        assert_eq!(a.bbox, b.bbox);
        let expect = kde_box(&r1, &p).unwrap().union(&kde_box(&r2, &p).unwrap());
        assert_eq!(a.bbox, expect);
        let (c, d) = side_by_side(&r1, &r1, &p).unwrap();
        assert_eq!(c.density, d.density);
    }

    #[test]
    fn degenerate_inputs() {
        let p = BootstrapParams::default();
        assert!(bootstrap_vector_field(&[[0.0, 0.0]], &[[1.0, 1.0], [2.0, 2.0]], &p, None).is_err());
        assert!(bootstrap_vector_field(&lattice(2, 1.0), &lattice(2, 1.0), &BootstrapParams { k: 0, ..p }, None).is_err());
    }
}
