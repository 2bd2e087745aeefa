//! Planar geometry shared by the county filter, annotations and contours.
//!
//! Points are `[x, y]` pairs. For geographic data `x` is longitude and `y`
//! latitude, both in degrees.

use serde::{Deserialize, Serialize};

pub type Point = [f64; 2];

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min: Point,
    pub max: Point,
}

impl BBox {
    /// Bounding box of a point set, `None` when empty.
    pub fn of_points<'a, I>(points: I) -> Option<Self>
    where
        I: IntoIterator<Item = &'a Point>,
    {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let mut b = BBox {
            min: first,
            max: first,
        };
        for p in it {
            b.min[0] = b.min[0].min(p[0]);
            b.min[1] = b.min[1].min(p[1]);
            b.max[0] = b.max[0].max(p[0]);
            b.max[1] = b.max[1].max(p[1]);
        }
        Some(b)
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            min: [self.min[0].min(other.min[0]), self.min[1].min(other.min[1])],
            max: [self.max[0].max(other.max[0]), self.max[1].max(other.max[1])],
        }
    }

    pub fn padded(&self, px: f64, py: f64) -> BBox {
        BBox {
            min: [self.min[0] - px, self.min[1] - py],
            max: [self.max[0] + px, self.max[1] + py],
        }
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn contains(&self, p: &Point) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

/// A polygon made of one or more rings, evaluated with the even-odd rule, so
/// holes are simply additional rings. Rings are stored open (the closing
/// vertex is not repeated).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub rings: Vec<Vec<Point>>,
}

impl Polygon {
    pub fn new(rings: Vec<Vec<Point>>) -> Self {
        Polygon { rings }
    }

    pub fn from_ring(ring: Vec<Point>) -> Self {
        Polygon { rings: vec![ring] }
    }

    /// Even-odd containment; points on any edge count as inside.
    pub fn contains(&self, p: &Point) -> bool {
        if self.rings.iter().any(|r| on_ring_boundary(r, p)) {
            return true;
        }
        self.rings.iter().filter(|r| ray_crossings_odd(r, p)).count() % 2 == 1
    }

    pub fn bbox(&self) -> Option<BBox> {
        BBox::of_points(self.rings.iter().flatten())
    }
}

/// Union of polygons: a point is inside if any member polygon contains it.
pub fn region_contains(region: &[Polygon], p: &Point) -> bool {
    region.iter().any(|poly| poly.contains(p))
}

fn on_segment(a: &Point, b: &Point, p: &Point) -> bool {
    let cross = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
    let scale = (b[0] - a[0]).abs() + (b[1] - a[1]).abs() + 1.0;
    if cross.abs() > 1e-12 * scale {
        return false;
    }
    p[0] >= a[0].min(b[0]) - 1e-12
        && p[0] <= a[0].max(b[0]) + 1e-12
        && p[1] >= a[1].min(b[1]) - 1e-12
        && p[1] <= a[1].max(b[1]) + 1e-12
}

fn on_ring_boundary(ring: &[Point], p: &Point) -> bool {
    let n = ring.len();
    (0..n).any(|i| on_segment(&ring[i], &ring[(i + 1) % n], p))
}

fn ray_crossings_odd(ring: &[Point], p: &Point) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n.wrapping_sub(1);
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Signed shoelace area of an open ring (positive when counter-clockwise).
pub fn ring_signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    let mut s = 0.0;
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s
}

fn orient(a: &Point, b: &Point, c: &Point) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Whether closed segments `p1p2` and `q1q2` intersect (touching counts).
pub fn segments_intersect(p1: &Point, p2: &Point, q1: &Point, q2: &Point) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(q1, q2, p1))
        || (d2 == 0.0 && on_segment(q1, q2, p2))
        || (d3 == 0.0 && on_segment(p1, p2, q1))
        || (d4 == 0.0 && on_segment(p1, p2, q2))
}

/// True when any two non-adjacent edges of the open ring intersect.
pub fn ring_self_intersects(ring: &[Point]) -> bool {
    let n = ring.len();
    if n < 4 {
        return false;
    }
    for i in 0..n {
        let (a1, a2) = (ring[i], ring[(i + 1) % n]);
        for j in (i + 1)..n {
            // adjacent edges share a vertex
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (b1, b2) = (ring[j], ring[(j + 1) % n]);
            if segments_intersect(&a1, &a2, &b1, &b2) {
                return true;
            }
        }
    }
    false
}

/// Convex hull by Andrew's monotone chain, counter-clockwise, without
/// collinear points. Degenerate inputs return the distinct points (≤ 2).
pub fn convex_hull(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<Point> = Vec::new();
    for p in &pts {
        while lower.len() >= 2 && orient(&lower[lower.len() - 2], &lower[lower.len() - 1], p) <= 0.0
        {
            lower.pop();
        }
        lower.push(*p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for p in pts.iter().rev() {
        while upper.len() >= 2 && orient(&upper[upper.len() - 2], &upper[upper.len() - 1], p) <= 0.0
        {
            upper.pop();
        }
        upper.push(*p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

pub fn dist(a: &Point, b: &Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> Polygon {
        Polygon::from_ring(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    }

    #[test]
    fn boundary_counts_as_inside() {
        let sq = unit_square();
        assert!(sq.contains(&[0.0, 0.0]));
        assert!(sq.contains(&[0.5, 0.0]));
        assert!(sq.contains(&[1.0, 0.7]));
        assert!(sq.contains(&[0.5, 0.5]));
        assert!(!sq.contains(&[1.0001, 0.5]));
        assert!(!sq.contains(&[-0.5, -0.5]));
    }

    #[test]
    fn hole_ring_excludes_interior() {
        let poly = Polygon::new(vec![
            vec![[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]],
            vec![[1.0, 1.0], [3.0, 1.0], [3.0, 3.0], [1.0, 3.0]],
        ]);
        assert!(poly.contains(&[0.5, 0.5]));
        assert!(!poly.contains(&[2.0, 2.0]));
        assert!(poly.contains(&[1.0, 2.0]));
    }

    #[test]
    fn hull_of_square_with_interior_points() {
        let pts = vec![[0.0, 0.0], [1.0, 0.0], [0.5, 0.5], [1.0, 1.0], [0.0, 1.0], [0.5, 0.0]];
        let hull = convex_hull(&pts);
        assert_eq!(hull.len(), 4);
        assert!(ring_signed_area(&hull) > 0.0);
        assert!((ring_signed_area(&hull) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bowtie_self_intersects() {
        let bowtie = vec![[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]];
        assert!(ring_self_intersects(&bowtie));
        let sq = vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        assert!(!ring_self_intersects(&sq));
    }
}
