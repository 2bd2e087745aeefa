//! Synthetic ensembles built from a handful of spatial archetypes. Each time
//! step of a member picks one archetype according to the member's mixing
//! weights, scales it by a jittered amplitude and adds white noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{CountyIndex, DataError, EnsembleDataset, MemberId, Result, SpatialGrid, TimeAxis};
use crate::geometry::Polygon;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticMember {
    pub id: MemberId,
    /// Mixing weight per archetype (non-negative, not necessarily normalized).
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub rows: usize,
    pub cols: usize,
    pub start_year: i32,
    pub years: usize,
    pub months: Vec<u8>,
    /// One pattern per archetype, each `rows * cols` long.
    pub archetypes: Vec<Vec<f64>>,
    pub members: Vec<SyntheticMember>,
    /// Standard deviation of the per-cell white noise.
    pub noise: f64,
    /// Amplitude is drawn from `1 ± amplitude_jitter`.
    pub amplitude_jitter: f64,
}

impl SyntheticSpec {
    /// Spec on a `rows × cols` lon/lat raster over the US West Coast with 12
    /// months per year.
    pub fn new(rows: usize, cols: usize, years: usize, archetypes: Vec<Vec<f64>>) -> Self {
        SyntheticSpec {
            rows,
            cols,
            start_year: 1950,
            years,
            months: (1..=12).collect(),
            archetypes,
            members: Vec::new(),
            noise: 0.1,
            amplitude_jitter: 0.0,
        }
    }

    pub fn member(mut self, gcm: &str, ssp: &str, weights: Vec<f64>) -> Self {
        self.members.push(SyntheticMember {
            id: MemberId::new(gcm, ssp, "r1i1p1f1"),
            weights,
        });
        self
    }

    pub fn noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn amplitude_jitter(mut self, jitter: f64) -> Self {
        self.amplitude_jitter = jitter;
        self
    }

    pub fn months(mut self, months: Vec<u8>) -> Self {
        self.months = months;
        self
    }
}

/// Gaussian random archetypes, one `cells`-long pattern each.
pub fn random_archetypes(count: usize, cells: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..cells).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

pub fn generate_synthetic_ensemble(spec: &SyntheticSpec, seed: u64) -> Result<EnsembleDataset> {
    if spec.archetypes.is_empty() {
        return Err(DataError::NoArchetypes);
    }
    let cells = spec.rows * spec.cols;
    if cells == 0 {
        return Err(DataError::InvalidSynthetic("empty raster".into()));
    }
    if let Some(a) = spec.archetypes.iter().find(|a| a.len() != cells) {
        return Err(DataError::InvalidSynthetic(format!(
            "archetype has {} cells, raster has {cells}",
            a.len()
        )));
    }
    let lats: Vec<f64> = (0..spec.rows)
        .map(|r| 42.0 - 10.0 * r as f64 / spec.rows.max(2).saturating_sub(1) as f64)
        .collect();
    let lons: Vec<f64> = (0..spec.cols)
        .map(|c| -124.5 + 10.0 * c as f64 / spec.cols.max(2).saturating_sub(1) as f64)
        .collect();
    let grid = SpatialGrid::full(lats, lons)?;
    let time = TimeAxis {
        start_year: spec.start_year,
        months: spec.months.clone(),
        years: spec.years,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(spec.members.len());
    for m in &spec.members {
        if m.weights.len() != spec.archetypes.len() {
            return Err(DataError::InvalidSynthetic(format!(
                "member {} has {} weights for {} archetypes",
                m.id,
                m.weights.len(),
                spec.archetypes.len()
            )));
        }
        let pick = WeightedIndex::new(&m.weights)
            .map_err(|e| DataError::InvalidSynthetic(format!("member {}: {e}", m.id)))?;
        let mut v = Vec::with_capacity(time.len() * cells);
        for _ in 0..time.len() {
            let a = &spec.archetypes[pick.sample(&mut rng)];
            let amp = if spec.amplitude_jitter > 0.0 {
                1.0 + rng.random_range(-spec.amplitude_jitter..=spec.amplitude_jitter)
            } else {
                1.0
            };
            for &x in a {
                let eps: f64 = rng.sample(StandardNormal);
                // keep values exactly representable in the f32 file format
                v.push((amp * x + spec.noise * eps) as f32 as f64);
            }
        }
        values.push(v);
    }
    let ids = spec.members.iter().map(|m| m.id.clone()).collect();
    EnsembleDataset::new(ids, grid, time, values)
}

/// County names of the 3 × 3 tiling laid over a synthetic raster, north row
/// first. The southern row falls in the stub's "Southern California".
pub const SYNTHETIC_COUNTIES: [[&str; 3]; 3] = [
    ["Humboldt-CA", "Shasta-CA", "Lassen-CA"],
    ["San Francisco-CA", "Fresno-CA", "Inyo-CA"],
    ["Los Angeles-CA", "Riverside-CA", "San Bernardino-CA"],
];

/// Rectangular stand-in counties tiling the raster's extent (padded by half
/// a cell) in a 3 × 3 layout.
pub fn synthetic_counties(grid: &SpatialGrid) -> CountyIndex {
    let span = |v: &[f64]| {
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        let pad = if v.len() > 1 { 0.5 * (hi - lo) / (v.len() - 1) as f64 } else { 0.5 };
        (lo - pad, hi + pad)
    };
    let (lat0, lat1) = span(&grid.lats);
    let (lon0, lon1) = span(&grid.lons);
    let mut index = CountyIndex::default();
    for (r, row) in SYNTHETIC_COUNTIES.iter().enumerate() {
        let top = lat1 - (lat1 - lat0) * r as f64 / 3.0;
        let bottom = lat1 - (lat1 - lat0) * (r + 1) as f64 / 3.0;
        for (c, name) in row.iter().enumerate() {
            let west = lon0 + (lon1 - lon0) * c as f64 / 3.0;
            let east = lon0 + (lon1 - lon0) * (c + 1) as f64 / 3.0;
            let ring = vec![[west, bottom], [east, bottom], [east, top], [west, top]];
            index.insert(*name, vec![Polygon::from_ring(ring)]).expect("names are distinct");
        }
    }
    index
}

#[cfg(test)]
mod tests {
    #[test]
    fn synthetic_counties_cover_the_grid() {
        let grid = SpatialGrid::full(vec![42.0, 37.0, 32.0], vec![-124.5, -119.5, -114.5]).unwrap();
        let index = synthetic_counties(&grid);
        assert_eq!(index.len(), 9);
        let la = grid.cells_in_region(index.get("Los Angeles-CA").unwrap());
        assert_eq!(la, vec![grid.cell_at(2, 0).unwrap()]);
        let all: Vec<_> = index.keys().flat_map(|k| grid.cells_in_region(index.get(k).unwrap())).collect();
        assert_eq!(all.len(), grid.num_cells());
    }

    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec::new(3, 4, 2, random_archetypes(2, 12, 1))
            .member("A", "historical", vec![1.0, 0.0])
            .member("B", "historical", vec![0.0, 1.0])
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic_ensemble(&spec(), 9).unwrap();
        let b = generate_synthetic_ensemble(&spec(), 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_ensemble(&spec(), 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_archetypes_is_an_error() {
        let mut s = spec();
        s.archetypes.clear();
        assert!(matches!(
            generate_synthetic_ensemble(&s, 0),
            Err(DataError::NoArchetypes)
        ));
    }
}
