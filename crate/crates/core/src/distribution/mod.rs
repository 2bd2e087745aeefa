//! Run distributions: every retained time step of a run becomes the layout
//! position of its best matching node. Temporal order is discarded.

mod contour;
mod kde;

pub use contour::iso_rings;
pub use kde::{bandwidth, kde, kde_box, Bandwidth, ContourLevel, KdeParams, KdeResult, HDR_MASSES};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotate::Annotation;
use crate::data::{DataError, EnsembleDataset, MonthFilter, SampleOrigin};
use crate::embed::Embedding;
use crate::geometry::Point;
use crate::par;
use crate::som::{SomError, SomGrid};

#[derive(Debug, Error)]
pub enum DistError {
    #[error("empty selection")]
    EmptySelection,
    #[error("degenerate distribution: fewer than 2 distinct points")]
    Degenerate,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("embedding has {embedding} nodes but the SOM has {som}")]
    NodeCountMismatch { embedding: usize, som: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Som(#[from] SomError),
}

pub type Result<T> = std::result::Result<T, DistError>;

/// Which members and calendar months a distribution was drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selector {
    pub members: Vec<String>,
    pub months: MonthFilter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDistribution {
    pub points: Vec<Point>,
    pub provenance: Vec<SampleOrigin>,
    /// Node index behind every point.
    pub nodes: Vec<usize>,
    pub selector: Selector,
}

impl RunDistribution {
    /// Distribution over bare points, without dataset provenance.
    pub fn from_points(points: Vec<Point>) -> Self {
        RunDistribution {
            provenance: Vec::new(),
            nodes: Vec::new(),
            points,
            selector: Selector {
                members: Vec::new(),
                months: MonthFilter::all(),
            },
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Pools several distributions into one.
    pub fn pooled<'a, I: IntoIterator<Item = &'a RunDistribution>>(parts: I) -> Self {
        let mut out = RunDistribution::from_points(Vec::new());
        out.selector.members.clear();
        for p in parts {
            out.points.extend_from_slice(&p.points);
            out.provenance.extend_from_slice(&p.provenance);
            out.nodes.extend_from_slice(&p.nodes);
            out.selector.members.extend(p.selector.members.iter().cloned());
        }
        out
    }
}

/// BMU of every (member, time step), computed once per trained SOM so
/// repeated projections are cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct BmuIndex {
    bmus: Vec<Vec<u32>>,
}

impl BmuIndex {
    pub fn compute(dataset: &EnsembleDataset, grid: &SomGrid) -> Result<Self> {
        if grid.dim != dataset.num_cells() {
            return Err(SomError::DimensionMismatch {
                expected: grid.dim,
                found: dataset.num_cells(),
            }
            .into());
        }
        let steps = dataset.num_steps();
        let members = dataset.members.len();
        let flat = par::map_range(members * steps, |i| {
            grid.bmu(dataset.step(i / steps, i % steps))
                .map(|m| m.best as u32)
        });
        let flat: Vec<u32> = flat.into_iter().collect::<std::result::Result<_, _>>()?;
        Ok(BmuIndex {
            bmus: flat.chunks(steps.max(1)).map(<[u32]>::to_vec).collect(),
        })
    }

    pub fn node(&self, member: usize, step: usize) -> usize {
        self.bmus[member][step] as usize
    }
}

/// Projects the selected members' time steps through an existing BMU index.
pub fn project_runs_indexed(
    dataset: &EnsembleDataset,
    index: &BmuIndex,
    members: &[usize],
    months: &MonthFilter,
    embedding: &Embedding,
) -> Result<RunDistribution> {
    if members.is_empty() {
        return Err(DistError::EmptySelection);
    }
    let steps = dataset.steps_in(months);
    if steps.is_empty() {
        return Err(DistError::EmptySelection);
    }
    let mut points = Vec::with_capacity(members.len() * steps.len());
    let mut provenance = Vec::with_capacity(points.capacity());
    let mut nodes = Vec::with_capacity(points.capacity());
    for &m in members {
        if m >= dataset.members.len() {
            return Err(DataError::UnknownMember(format!("#{m}")).into());
        }
        for &t in &steps {
            let node = index.node(m, t);
            if node >= embedding.num_nodes() {
                return Err(DistError::NodeCountMismatch {
                    embedding: embedding.num_nodes(),
                    som: node + 1,
                });
            }
            let (year, month) = dataset.time.date(t);
            points.push(embedding.positions[node]);
            nodes.push(node);
            provenance.push(SampleOrigin {
                member: m,
                step: t,
                year,
                month,
            });
        }
    }
    Ok(RunDistribution {
        points,
        provenance,
        nodes,
        selector: Selector {
            members: members.iter().map(|&m| dataset.members[m].key()).collect(),
            months: months.clone(),
        },
    })
}

/// `p_i = layout(BMU(r_i))` for every retained step of the selected members.
pub fn project_runs(
    dataset: &EnsembleDataset,
    members: &[usize],
    months: &MonthFilter,
    grid: &SomGrid,
    embedding: &Embedding,
) -> Result<RunDistribution> {
    if embedding.num_nodes() != grid.num_nodes() {
        return Err(DistError::NodeCountMismatch {
            embedding: embedding.num_nodes(),
            som: grid.num_nodes(),
        });
    }
    if members.is_empty() {
        return Err(DistError::EmptySelection);
    }
    let steps = dataset.steps_in(months);
    let pairs: Vec<(usize, usize)> = members
        .iter()
        .flat_map(|&m| steps.iter().map(move |&t| (m, t)))
        .collect();
    if let Some(&(m, _)) = pairs.iter().find(|(m, _)| *m >= dataset.members.len()) {
        return Err(DataError::UnknownMember(format!("#{m}")).into());
    }
    let found = par::map_slice(&pairs, |&(m, t)| grid.bmu(dataset.step(m, t)).map(|b| b.best));
    let mut bmus = vec![vec![0u32; dataset.num_steps()]; dataset.members.len()];
    for (&(m, t), b) in pairs.iter().zip(found) {
        bmus[m][t] = b? as u32;
    }
    project_runs_indexed(dataset, &BmuIndex { bmus }, members, months, embedding)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationShare {
    pub id: u64,
    pub label: String,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationBreakdown {
    pub annotations: Vec<AnnotationShare>,
    /// Share of points inside no annotation.
    pub unannotated: f64,
}

/// Fraction of points inside each annotation (boundary counts as inside).
/// Overlapping annotations each count a shared point.
pub fn annotation_breakdown(points: &[Point], annotations: &[Annotation]) -> AnnotationBreakdown {
    let n = points.len().max(1) as f64;
    let polys: Vec<_> = annotations.iter().map(Annotation::polygon).collect();
    let mut counts = vec![0usize; annotations.len()];
    let mut outside = 0usize;
    for p in points {
        let mut any = false;
        for (c, poly) in counts.iter_mut().zip(&polys) {
            if poly.contains(p) {
                *c += 1;
                any = true;
            }
        }
        if !any {
            outside += 1;
        }
    }
    AnnotationBreakdown {
        annotations: annotations
            .iter()
            .zip(counts)
            .map(|(a, c)| AnnotationShare {
                id: a.id,
                label: a.label.clone(),
                fraction: c as f64 / n,
            })
            .collect(),
        unannotated: if points.is_empty() { 1.0 } else { outside as f64 / n },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn square(id: u64, x0: f64, y0: f64, x1: f64, y1: f64) -> Annotation {
        Annotation::new(id, format!("a{id}"), vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]], id)
            .unwrap()
    }

    #[test]
    fn breakdown_counts_one_of_four() {
        let pts = [[0.0, 0.0], [5.0, 5.0], [6.0, 6.0], [7.0, 7.0]];
        let b = annotation_breakdown(&pts, &[square(1, -1.0, -1.0, 1.0, 1.0)]);
        assert_eq!(b.annotations[0].fraction, 0.25);
        assert_eq!(b.unannotated, 0.75);
    }

    #[test]
    fn breakdown_total_cover_and_empty_set() {
        let pts = [[0.0, 0.0], [1.0, 2.0], [2.0, 1.0]];
        let b = annotation_breakdown(&pts, &[square(1, 0.0, 0.0, 2.0, 2.0)]);
        assert_eq!(b.annotations[0].fraction, 1.0);
        assert_eq!(b.unannotated, 0.0);
        assert_eq!(annotation_breakdown(&pts, &[]).unannotated, 1.0);
    }

    #[test]
    fn breakdown_matches_per_point_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Point> = (0..500)
            .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
            .collect();
        let tri = Annotation::new(2, "tri".into(), vec![[-1.0, -1.0], [1.5, -0.5], [0.0, 1.7]], 2)
            .unwrap();
        let annotations = [square(1, -0.5, -0.5, 1.0, 1.0), tri];
        let b = annotation_breakdown(&pts, &annotations);
        // independent crossing-number test per point
        fn inside(poly: &[Point], p: &Point) -> bool {
            let mut c = false;
            for i in 0..poly.len() {
                let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
                if (a[1] > p[1]) != (b[1] > p[1])
                    && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0]
                {
                    c = !c;
                }
            }
            c
        }
        let mut none = 0;
        for (k, a) in annotations.iter().enumerate() {
            let n = pts.iter().filter(|p| inside(&a.vertices, p)).count();
            assert_eq!(b.annotations[k].fraction, n as f64 / 500.0);
        }
        for p in &pts {
            if !annotations.iter().any(|a| inside(&a.vertices, p)) {
                none += 1;
            }
        }
        assert_eq!(b.unannotated, none as f64 / 500.0);
        let in_any = 1.0 - b.unannotated;
        assert!((b.unannotated + in_any - 1.0).abs() < 1e-12);
    }

    fn gaussian_points(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
            .collect()
    }

    #[test]
    fn kde_integrates_to_one_and_contours_nest() {
        let pts = gaussian_points(400, 5);
        let k = kde(&pts, &KdeParams { grid: 64, ..Default::default() }, None).unwrap();
        assert!((k.integral() - 1.0).abs() < 1e-3);
        assert!(k.density.iter().all(|d| *d >= 0.0));
        assert!(k.contours[0].threshold > k.contours[1].threshold);
        assert!(k.contours[1].threshold > k.contours[2].threshold);
        assert!(k.region_area(0) <= k.region_area(1));
        assert!(k.region_area(1) <= k.region_area(2));
    }

    #[test]
    fn kde_rejects_identical_points() {
        let pts = vec![[1.0, 1.0]; 10];
        assert!(matches!(
            kde(&pts, &KdeParams::default(), None),
            Err(DistError::Degenerate)
        ));
    }

    #[test]
    fn kde_is_order_invariant() {
        let pts = gaussian_points(100, 8);
        let mut rev = pts.clone();
        rev.reverse();
        let p = KdeParams { grid: 32, ..Default::default() };
        let a = kde(&pts, &p, None).unwrap();
        let b = kde(&rev, &p, None).unwrap();
        for (x, y) in a.density.iter().zip(&b.density) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-300));
        }
    }

    #[test]
    fn bimodal_quarter_contour_has_two_components() {
        let mut pts: Vec<Point> = gaussian_points(300, 1)
            .into_iter()
            .map(|p| [p[0] * 0.3 - 3.0, p[1] * 0.3])
            .collect();
        pts.extend(gaussian_points(300, 2).into_iter().map(|p| [p[0] * 0.3 + 3.0, p[1] * 0.3]));
        let k = kde(&pts, &KdeParams::default(), None).unwrap();
        assert!(k.contours[0].rings.len() >= 2, "{}", k.contours[0].rings.len());
    }
}
