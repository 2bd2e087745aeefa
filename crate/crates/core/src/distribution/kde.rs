use serde::{Deserialize, Serialize};

use super::contour::iso_rings;
use super::{DistError, Result};
use crate::geometry::{BBox, Point, Polygon};
use crate::par;

/// Probability masses of the highest-density regions drawn for every KDE.
pub const HDR_MASSES: [f64; 3] = [0.25, 0.50, 0.75];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum Bandwidth {
    /// Per-axis Scott's rule, `σ̂ · n^(−1/6)`.
    Scott,
    Explicit { hx: f64, hy: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdeParams {
    pub grid: usize,
    pub bandwidth: Bandwidth,
}

impl Default for KdeParams {
    fn default() -> Self {
        KdeParams {
            grid: 128,
            bandwidth: Bandwidth::Scott,
        }
    }
}

/// Highest-density region holding `mass` of the probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContourLevel {
    pub mass: f64,
    pub threshold: f64,
    pub rings: Vec<Vec<Point>>,
}

impl ContourLevel {
    pub fn contains(&self, p: &Point) -> bool {
        Polygon::new(self.rings.clone()).contains(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeResult {
    pub bbox: BBox,
    /// Grid resolution per axis.
    pub grid: usize,
    /// Row-major `grid × grid` densities; row 0 is the lowest `y`.
    pub density: Vec<f64>,
    pub bandwidth: [f64; 2],
    pub contours: Vec<ContourLevel>,
}

impl KdeResult {
    pub fn cell_size(&self) -> [f64; 2] {
        [
            self.bbox.width() / self.grid as f64,
            self.bbox.height() / self.grid as f64,
        ]
    }

    pub fn cell_area(&self) -> f64 {
        let c = self.cell_size();
        c[0] * c[1]
    }

    /// Midpoint-rule integral of the density over the box.
    pub fn integral(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.cell_area()
    }

    /// Area of `{density ≥ threshold}` for contour level `i`, in cells × area.
    pub fn region_area(&self, i: usize) -> f64 {
        let t = self.contours[i].threshold;
        self.density.iter().filter(|&&d| d >= t).count() as f64 * self.cell_area()
    }
}

/// Per-axis bandwidth for `points` under `rule`.
pub fn bandwidth(points: &[Point], rule: Bandwidth) -> Result<[f64; 2]> {
    match rule {
        Bandwidth::Explicit { hx, hy } => {
            if !(hx > 0.0 && hy > 0.0 && hx.is_finite() && hy.is_finite()) {
                return Err(DistError::InvalidParams("bandwidth must be positive".into()));
            }
            Ok([hx, hy])
        }
        Bandwidth::Scott => {
            let n = points.len() as f64;
            let diag = BBox::of_points(points).map_or(0.0, |b| b.diagonal());
            let floor = 1e-6 * diag;
            let factor = n.powf(-1.0 / 6.0);
            let axis = |i: usize| {
                let mean = points.iter().map(|p| p[i]).sum::<f64>() / n;
                let var = points.iter().map(|p| (p[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
                var.sqrt().max(floor) * factor
            };
            Ok([axis(0), axis(1)])
        }
    }
}

fn check_points(points: &[Point]) -> Result<()> {
    let first = points.first().ok_or(DistError::Degenerate)?;
    if !points.iter().any(|p| p != first) {
        return Err(DistError::Degenerate);
    }
    Ok(())
}

/// Bounding box of the points padded by three bandwidths per axis.
pub fn kde_box(points: &[Point], params: &KdeParams) -> Result<BBox> {
    check_points(points)?;
    let h = bandwidth(points, params.bandwidth)?;
    Ok(BBox::of_points(points).unwrap().padded(3.0 * h[0], 3.0 * h[1]))
}

/// Product-Gaussian KDE evaluated on a `grid × grid` lattice of cell centres.
/// When `bbox` is `None` the padded bounding box of the points is used.
///
/// The discrete density is normalized to integrate to one over the box, so
/// mass that the Gaussian tails would place outside is redistributed.
pub fn kde(points: &[Point], params: &KdeParams, bbox: Option<BBox>) -> Result<KdeResult> {
    check_points(points)?;
    if params.grid < 2 {
        return Err(DistError::InvalidParams("grid must be at least 2".into()));
    }
    let h = bandwidth(points, params.bandwidth)?;
    let bbox = match bbox {
        Some(b) => b,
        None => BBox::of_points(points).unwrap().padded(3.0 * h[0], 3.0 * h[1]),
    };
    let g = params.grid;
    let cw = bbox.width() / g as f64;
    let ch = bbox.height() / g as f64;
    if !(cw > 0.0 && ch > 0.0) {
        return Err(DistError::Degenerate);
    }

    let gauss = |d: f64, h: f64| (-0.5 * (d / h).powi(2)).exp() / (h * (2.0 * std::f64::consts::PI).sqrt());
    // kernel tables: kx[i][c], ky[i][r]
    let kx: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            (0..g)
                .map(|c| gauss(bbox.min[0] + (c as f64 + 0.5) * cw - p[0], h[0]))
                .collect()
        })
        .collect();
    let ky: Vec<Vec<f64>> = points
        .iter()
        .map(|p| {
            (0..g)
                .map(|r| gauss(bbox.min[1] + (r as f64 + 0.5) * ch - p[1], h[1]))
                .collect()
        })
        .collect();
    let n = points.len() as f64;
    let rows: Vec<Vec<f64>> = par::map_range(g, |r| {
        let mut row = vec![0.0; g];
        for (kxi, kyi) in kx.iter().zip(&ky) {
            let wy = kyi[r];
            if wy == 0.0 {
                continue;
            }
            for (acc, &wx) in row.iter_mut().zip(kxi) {
                *acc += wy * wx;
            }
        }
        row.iter_mut().for_each(|v| *v /= n);
        row
    });
    let mut density: Vec<f64> = rows.into_iter().flatten().collect();
    let total = density.iter().sum::<f64>() * cw * ch;
    if !(total > 0.0) {
        return Err(DistError::Degenerate);
    }
    density.iter_mut().for_each(|d| *d /= total);

    let mut sorted = density.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let area = cw * ch;
    let contours = HDR_MASSES
        .iter()
        .map(|&mass| {
            let mut acc = 0.0;
            let mut threshold = sorted[sorted.len() - 1];
            for &d in &sorted {
                acc += d * area;
                if acc >= mass {
                    threshold = d;
                    break;
                }
            }
            ContourLevel {
                mass,
                threshold,
                rings: iso_rings(&density, g, g, bbox.min, [cw, ch], threshold),
            }
        })
        .collect();
    Ok(KdeResult {
        bbox,
        grid: g,
        density,
        bandwidth: h,
        contours,
    })
}
