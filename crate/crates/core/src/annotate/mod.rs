//! Annotations over the node layout, the structured node filter, and the
//! county bucketing that feeds region summaries.

mod llm;
mod query;

pub use llm::{
    prompt_template, resolve_region, summarize_region, ChatClient, LlmClient, LlmError, LlmRequest,
    LlmTask, RegionSummary, ResolvedRegion, StubLlm,
};
pub use query::{parse_filter_json, parse_forward_query, stub_filter_json, FilterSpec, ForwardQuery};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{mean_over_cells, CountyIndex, DataError, SpatialGrid};
use crate::embed::Embedding;
use crate::geometry::{convex_hull, dist, ring_self_intersects, Point, Polygon};
use crate::som::SomGrid;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("region contains no grid cells")]
    EmptyRegion,
    #[error("polygon contains no nodes")]
    NoNodesInPolygon,
    #[error("no known counties for region {0:?}")]
    NoCounties(String),
    #[error("could not parse model output: {0}")]
    Unparseable(String),
    #[error("unsupported question: {0}")]
    Unsupported(String),
    #[error("empty bucket list")]
    EmptyBuckets,
    #[error("cutoffs must be strictly ascending")]
    Cutoffs,
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, AnnotateError>;

/// A labelled polygon in layout space. Vertices are stored open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub label: String,
    pub vertices: Vec<Point>,
    pub created_order: u64,
}

impl Annotation {
    pub fn new(id: u64, label: String, mut vertices: Vec<Point>, created_order: u64) -> Result<Self> {
        if vertices.len() > 1 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        let bad = |m: &str| Err(AnnotateError::InvalidAnnotation(m.to_string()));
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return bad("non-finite vertex");
        }
        let mut distinct = vertices.clone();
        distinct.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
        distinct.dedup();
        if distinct.len() < 3 {
            return bad("fewer than 3 distinct vertices");
        }
        if ring_self_intersects(&vertices) {
            return bad("polygon self-intersects");
        }
        Ok(Annotation {
            id,
            label,
            vertices,
            created_order,
        })
    }

    pub fn polygon(&self) -> Polygon {
        Polygon::from_ring(self.vertices.clone())
    }

    pub fn validate(&self) -> Result<()> {
        Annotation::new(self.id, self.label.clone(), self.vertices.clone(), self.created_order).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    ThresholdAbove,
    ThresholdBelow,
    Between,
    RegionVsRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredFilter {
    pub kind: FilterKind,
    pub region_a: Vec<Polygon>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_b: Option<Vec<Polygon>>,
    #[serde(default)]
    pub x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<f64>,
}

impl StructuredFilter {
    pub fn threshold_above(region: Vec<Polygon>, x: f64) -> Self {
        Self::simple(FilterKind::ThresholdAbove, region, x)
    }

    pub fn threshold_below(region: Vec<Polygon>, x: f64) -> Self {
        Self::simple(FilterKind::ThresholdBelow, region, x)
    }

    pub fn between(region: Vec<Polygon>, x: f64, y: f64) -> Self {
        StructuredFilter {
            y: Some(y),
            ..Self::simple(FilterKind::Between, region, x)
        }
    }

    pub fn region_vs_region(a: Vec<Polygon>, b: Vec<Polygon>) -> Self {
        StructuredFilter {
            region_b: Some(b),
            ..Self::simple(FilterKind::RegionVsRegion, a, 0.0)
        }
    }

    fn simple(kind: FilterKind, region_a: Vec<Polygon>, x: f64) -> Self {
        StructuredFilter {
            kind,
            region_a,
            region_b: None,
            x,
            y: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AnnotateError::InvalidFilter(m.to_string()));
        match self.kind {
            FilterKind::Between => match self.y {
                Some(y) if self.x < y => Ok(()),
                Some(_) => bad("between requires x < y"),
                None => bad("between requires y"),
            },
            FilterKind::RegionVsRegion if self.region_b.is_none() => bad("region_vs_region requires region_b"),
            _ if self.x.is_nan() => bad("x is NaN"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub nodes: Vec<usize>,
    /// Convex hull of the passing nodes' layout positions; `None` when no node passes.
    pub boundary: Option<Vec<Point>>,
}

fn region_cells(spatial: &SpatialGrid, region: &[Polygon]) -> Result<Vec<usize>> {
    let cells = spatial.cells_in_region(region);
    if cells.is_empty() {
        return Err(AnnotateError::EmptyRegion);
    }
    Ok(cells)
}

/// Nodes whose region means satisfy the filter. Threshold comparisons are
/// strict; `between` is inclusive at both ends.
pub fn apply_filter(
    filter: &StructuredFilter,
    grid: &SomGrid,
    spatial: &SpatialGrid,
    embedding: &Embedding,
) -> Result<FilterResult> {
    filter.validate()?;
    let cells_a = region_cells(spatial, &filter.region_a)?;
    let cells_b = match &filter.region_b {
        Some(b) if filter.kind == FilterKind::RegionVsRegion => Some(region_cells(spatial, b)?),
        _ => None,
    };
    let dim = grid.dim;
    let mut nodes = Vec::new();
    for k in 0..grid.num_nodes() {
        let w = grid.node(k);
        let a = mean_over_cells(w, &cells_a, dim)?;
        let pass = match filter.kind {
            FilterKind::ThresholdAbove => a > filter.x,
            FilterKind::ThresholdBelow => a < filter.x,
            FilterKind::Between => filter.x <= a && a <= filter.y.unwrap_or(f64::NAN),
            FilterKind::RegionVsRegion => {
                a > mean_over_cells(w, cells_b.as_deref().unwrap_or_default(), dim)?
            }
        };
        if pass {
            nodes.push(k);
        }
    }
    let boundary = if nodes.is_empty() {
        None
    } else {
        let pts: Vec<Point> = nodes.iter().map(|&k| embedding.positions[k]).collect();
        Some(convex_hull(&pts))
    };
    Ok(FilterResult { nodes, boundary })
}

/// Bucket boundaries in standard deviations, ascending.
pub const DEFAULT_CUTOFFS: [f64; 4] = [-1.5, -0.5, 0.5, 1.5];
pub const DEFAULT_SAMPLES: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    High,
    ModHigh,
    Neutral,
    ModLow,
    Low,
}

impl Bucket {
    pub const ALL: [Bucket; 5] = [Bucket::High, Bucket::ModHigh, Bucket::Neutral, Bucket::ModLow, Bucket::Low];

    /// `v < c0` low, `c0 ≤ v < c1` moderately low, `c1 ≤ v ≤ c2` neutral,
    /// `c2 < v ≤ c3` moderately high, `v > c3` high.
    pub fn classify(v: f64, c: &[f64; 4]) -> Bucket {
        if v < c[0] {
            Bucket::Low
        } else if v < c[1] {
            Bucket::ModLow
        } else if v <= c[2] {
            Bucket::Neutral
        } else if v <= c[3] {
            Bucket::ModHigh
        } else {
            Bucket::High
        }
    }

    /// Key used in the summary prompt record.
    pub fn prompt_key(self) -> &'static str {
        match self {
            Bucket::High => "high_precipitation",
            Bucket::ModHigh => "moderate_high_precipitation",
            Bucket::Neutral => "neutral_precipitation",
            Bucket::ModLow => "moderate_low_precipitation",
            Bucket::Low => "low_precipitation",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Bucket::High => "high",
            Bucket::ModHigh => "moderately high",
            Bucket::Neutral => "neutral",
            Bucket::ModLow => "moderately low",
            Bucket::Low => "low",
        }
    }
}

pub fn validate_cutoffs(c: &[f64; 4]) -> Result<()> {
    if c.iter().all(|v| v.is_finite()) && c.windows(2).all(|w| w[0] < w[1]) {
        Ok(())
    } else {
        Err(AnnotateError::Cutoffs)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NodeSummaryBuckets {
    pub node: usize,
    pub high: Vec<String>,
    pub mod_high: Vec<String>,
    pub neutral: Vec<String>,
    pub mod_low: Vec<String>,
    pub low: Vec<String>,
    pub cutoffs: [f64; 4],
}

impl NodeSummaryBuckets {
    pub fn get(&self, b: Bucket) -> &[String] {
        match b {
            Bucket::High => &self.high,
            Bucket::ModHigh => &self.mod_high,
            Bucket::Neutral => &self.neutral,
            Bucket::ModLow => &self.mod_low,
            Bucket::Low => &self.low,
        }
    }

    fn get_mut(&mut self, b: Bucket) -> &mut Vec<String> {
        match b {
            Bucket::High => &mut self.high,
            Bucket::ModHigh => &mut self.mod_high,
            Bucket::Neutral => &mut self.neutral,
            Bucket::ModLow => &mut self.mod_low,
            Bucket::Low => &mut self.low,
        }
    }
}

/// Farthest-point sample of up to `count` candidates, starting from the
/// first candidate. Ties go to the earlier candidate.
pub fn farthest_point_sample(candidates: &[usize], positions: &[Point], count: usize) -> Vec<usize> {
    if candidates.is_empty() || count == 0 {
        return Vec::new();
    }
    let mut chosen = vec![candidates[0]];
    let mut nearest: Vec<f64> = candidates
        .iter()
        .map(|&k| dist(&positions[k], &positions[candidates[0]]))
        .collect();
    while chosen.len() < count.min(candidates.len()) {
        let mut best = None;
        for (i, &d) in nearest.iter().enumerate() {
            if chosen.contains(&candidates[i]) {
                continue;
            }
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let Some((i, _)) = best else { break };
        let k = candidates[i];
        chosen.push(k);
        for (j, n) in nearest.iter_mut().enumerate() {
            *n = n.min(dist(&positions[candidates[j]], &positions[k]));
        }
    }
    chosen
}

/// Samples nodes inside `region` and sorts every county into a bucket by its
/// mean over the node's pattern. Counties covering no grid cell are skipped.
pub fn bucket_nodes(
    region: &[Point],
    grid: &SomGrid,
    spatial: &SpatialGrid,
    embedding: &Embedding,
    counties: &CountyIndex,
    cutoffs: [f64; 4],
    samples: usize,
) -> Result<Vec<NodeSummaryBuckets>> {
    validate_cutoffs(&cutoffs)?;
    let poly = Polygon::from_ring(region.to_vec());
    let inside: Vec<usize> = (0..embedding.num_nodes())
        .filter(|&k| poly.contains(&embedding.positions[k]))
        .collect();
    if inside.is_empty() {
        return Err(AnnotateError::NoNodesInPolygon);
    }
    let sampled = farthest_point_sample(&inside, &embedding.positions, samples);
    let county_cells: Vec<(&str, Vec<usize>)> = counties
        .keys()
        .map(|k| (k, spatial.cells_in_region(counties.get(k).unwrap_or_default())))
        .filter(|(_, cells)| !cells.is_empty())
        .collect();
    sampled
        .into_iter()
        .map(|node| {
            let mut rec = NodeSummaryBuckets {
                node,
                cutoffs,
                ..Default::default()
            };
            for (key, cells) in &county_cells {
                let v = mean_over_cells(grid.node(node), cells, grid.dim)?;
                rec.get_mut(Bucket::classify(v, &cutoffs)).push(key.to_string());
            }
            Ok(rec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{embed_grid, MdeConfig};
    use crate::som::SomConfig;

    #[test]
    fn annotation_validation() {
        let sq = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [0.0, 0.0]];
        let a = Annotation::new(1, "sq".into(), sq, 0).unwrap();
        assert_eq!(a.vertices.len(), 4);
        let bow = vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(Annotation::new(2, "bow".into(), bow, 1).is_err());
        let line = vec![[0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [1.0, 1.0]];
        assert!(Annotation::new(3, "l".into(), line, 2).is_err());
    }

    #[test]
    fn bucket_cutoffs() {
        let c = DEFAULT_CUTOFFS;
        assert_eq!(Bucket::classify(1.7, &c), Bucket::High);
        assert_eq!(Bucket::classify(0.0, &c), Bucket::Neutral);
        assert_eq!(Bucket::classify(0.5, &c), Bucket::Neutral);
        assert_eq!(Bucket::classify(-0.5, &c), Bucket::Neutral);
        assert_eq!(Bucket::classify(1.5, &c), Bucket::ModHigh);
        assert_eq!(Bucket::classify(-1.5, &c), Bucket::ModLow);
        assert_eq!(Bucket::classify(-2.0, &c), Bucket::Low);
        assert!(validate_cutoffs(&[0.0, 0.0, 1.0, 2.0]).is_err());
    }

    fn two_node_setup() -> (SomGrid, SpatialGrid, Embedding) {
        // 1×2 raster, node 0 has mean -0.5 over the region, node 1 has +0.5
        let spatial = SpatialGrid::full(vec![0.0], vec![0.0, 1.0]).unwrap();
        let cfg = SomConfig {
            rows: 1,
            cols: 2,
            ..Default::default()
        };
        let grid = SomGrid::from_weights(cfg, 2, vec![-0.5, -0.5, 0.5, 0.5]).unwrap();
        let emb = embed_grid(&grid, &MdeConfig::default()).unwrap();
        (grid, spatial, emb)
    }

    fn everything() -> Vec<Polygon> {
        vec![Polygon::from_ring(vec![[-10.0, -10.0], [10.0, -10.0], [10.0, 10.0], [-10.0, 10.0]])]
    }

    #[test]
    fn threshold_selects_second_node() {
        let (g, s, e) = two_node_setup();
        let r = apply_filter(&StructuredFilter::threshold_above(everything(), 0.0), &g, &s, &e).unwrap();
        assert_eq!(r.nodes, vec![1]);
        let all = apply_filter(&StructuredFilter::threshold_above(everything(), -1e9), &g, &s, &e).unwrap();
        assert_eq!(all.nodes, vec![0, 1]);
        let none = apply_filter(&StructuredFilter::threshold_above(everything(), 9.0), &g, &s, &e).unwrap();
        assert!(none.nodes.is_empty() && none.boundary.is_none());
    }

    #[test]
    fn empty_region_is_an_error() {
        let (g, s, e) = two_node_setup();
        let far = vec![Polygon::from_ring(vec![[50.0, 50.0], [51.0, 50.0], [51.0, 51.0]])];
        assert!(matches!(
            apply_filter(&StructuredFilter::threshold_above(far, 0.0), &g, &s, &e),
            Err(AnnotateError::EmptyRegion)
        ));
        let bad = StructuredFilter::between(everything(), 1.0, -1.0);
        assert!(apply_filter(&bad, &g, &s, &e).is_err());
    }

    #[test]
    fn farthest_point_clamps_and_spreads() {
        let pos = [[0.0, 0.0], [0.1, 0.0], [5.0, 0.0], [2.4, 0.0]];
        assert_eq!(farthest_point_sample(&[0, 1, 2, 3], &pos, 2), vec![0, 2]);
        assert_eq!(farthest_point_sample(&[0, 1, 2], &pos, 9).len(), 3);
    }

    #[test]
    fn buckets_cover_every_county_once() {
        let (g, s, e) = two_node_setup();
        let mut counties = CountyIndex::default();
        let sq = |x: f64| vec![Polygon::from_ring(vec![[x - 0.2, -0.2], [x + 0.2, -0.2], [x + 0.2, 0.2], [x - 0.2, 0.2]])];
        counties.insert("West-XX", sq(0.0)).unwrap();
        counties.insert("East-XX", sq(1.0)).unwrap();
        counties.insert("Ocean-XX", sq(40.0)).unwrap();
        let region: Vec<Point> = vec![[-100.0, -100.0], [100.0, -100.0], [100.0, 100.0], [-100.0, 100.0]];
        let recs = bucket_nodes(&region, &g, &s, &e, &counties, DEFAULT_CUTOFFS, 9).unwrap();
        assert_eq!(recs.len(), 2);
        for r in &recs {
            let total: usize = Bucket::ALL.iter().map(|b| r.get(*b).len()).sum();
            assert_eq!(total, 2);
            assert_eq!(r.neutral.len(), 2);
        }
        let tiny = vec![[500.0, 500.0], [501.0, 500.0], [501.0, 501.0]];
        assert!(matches!(
            bucket_nodes(&tiny, &g, &s, &e, &counties, DEFAULT_CUTOFFS, 9),
            Err(AnnotateError::NoNodesInPolygon)
        ));
    }
}
