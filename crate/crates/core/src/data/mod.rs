//! Ensemble ingestion, per-month normalization, sample flattening and the
//! spatial helpers that tie grid cells to county polygons.

mod counties;
mod io;
mod synthetic;

pub use counties::{load_counties, parse_counties, CountyIndex};
pub use io::{load_ensemble, save_ensemble, Manifest};
pub use synthetic::{
    generate_synthetic_ensemble, random_archetypes, synthetic_counties, SyntheticMember, SyntheticSpec, SYNTHETIC_COUNTIES,
};

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{region_contains, Point, Polygon};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing manifest: {0}")]
    MissingManifest(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("member array length mismatch for {member}: expected {expected} values, found {found}")]
    LengthMismatch {
        member: String,
        expected: usize,
        found: usize,
    },
    #[error("non-finite value in member {member} at index {index}")]
    NonFinite { member: String, index: usize },
    #[error("zero pooled standard deviation for month {0}")]
    ZeroStd(u8),
    #[error("dataset is already normalized")]
    AlreadyNormalized,
    #[error("dataset must be normalized first")]
    NotNormalized,
    #[error("invalid month {0}")]
    InvalidMonth(i64),
    #[error("empty month filter")]
    EmptyMonthFilter,
    #[error("month filter selects no dataset months")]
    MonthsNotInDataset,
    #[error("pattern length {found} does not match cell count {expected}")]
    PatternLength { expected: usize, found: usize },
    #[error("region contains no grid cells")]
    EmptyRegion,
    #[error("invalid GeoJSON: {0}")]
    GeoJson(String),
    #[error("duplicate county key {0}")]
    DuplicateCounty(String),
    #[error("unclosed ring in county {0}")]
    UnclosedRing(String),
    #[error("synthetic spec needs at least one archetype")]
    NoArchetypes,
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthetic(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("unknown member {0}")]
    UnknownMember(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One ensemble member: a single (GCM, SSP) run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MemberId {
    pub gcm: String,
    pub ssp: String,
    pub variant: String,
}

impl MemberId {
    pub fn new(gcm: impl Into<String>, ssp: impl Into<String>, variant: impl Into<String>) -> Self {
        MemberId {
            gcm: gcm.into(),
            ssp: ssp.into(),
            variant: variant.into(),
        }
    }

    /// `gcm/ssp/variant`, the key used by the API and CLI.
    pub fn key(&self) -> String {
        format!("{}/{}/{}", self.gcm, self.ssp, self.variant)
    }

    pub fn is_historical(&self) -> bool {
        self.ssp.eq_ignore_ascii_case("historical")
    }
}

impl fmt::Display for MemberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub lat: f64,
    pub lon: f64,
}

impl Cell {
    /// `[lon, lat]`, the orientation used by GeoJSON polygons.
    pub fn lonlat(&self) -> Point {
        [self.lon, self.lat]
    }
}

/// Valid cells of a `rows × cols` raster. Invalid raster positions are dropped
/// at ingestion, so every cell index refers to real data.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    pub rows: usize,
    pub cols: usize,
    pub lats: Vec<f64>,
    pub lons: Vec<f64>,
    pub cells: Vec<Cell>,
    cell_to_raster: Vec<usize>,
    raster_to_cell: Vec<Option<usize>>,
}

impl SpatialGrid {
    /// Builds the grid from 1-D axes and a row-major validity mask.
    pub fn new(lats: Vec<f64>, lons: Vec<f64>, valid: &[bool]) -> Result<Self> {
        let (rows, cols) = (lats.len(), lons.len());
        if rows * cols != valid.len() {
            return Err(DataError::Invalid(format!(
                "valid mask has {} entries for a {rows}x{cols} raster",
                valid.len()
            )));
        }
        let mut cells = Vec::new();
        let mut cell_to_raster = Vec::new();
        let mut raster_to_cell = vec![None; rows * cols];
        for (pos, ok) in valid.iter().enumerate() {
            if *ok {
                raster_to_cell[pos] = Some(cells.len());
                cell_to_raster.push(pos);
                cells.push(Cell {
                    lat: lats[pos / cols],
                    lon: lons[pos % cols],
                });
            }
        }
        if cells.is_empty() {
            return Err(DataError::Invalid("grid has no valid cells".into()));
        }
        Ok(SpatialGrid {
            rows,
            cols,
            lats,
            lons,
            cells,
            cell_to_raster,
            raster_to_cell,
        })
    }

    /// Fully valid raster.
    pub fn full(lats: Vec<f64>, lons: Vec<f64>) -> Result<Self> {
        let n = lats.len() * lons.len();
        Self::new(lats, lons, &vec![true; n])
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn raster_position(&self, cell: usize) -> (usize, usize) {
        let pos = self.cell_to_raster[cell];
        (pos / self.cols, pos % self.cols)
    }

    pub fn cell_at(&self, row: usize, col: usize) -> Option<usize> {
        self.raster_to_cell.get(row * self.cols + col).copied().flatten()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.raster_to_cell.iter().map(Option::is_some).collect()
    }

    /// Indices of cells whose centre lies inside the region.
    pub fn cells_in_region(&self, region: &[Polygon]) -> Vec<usize> {
        let bboxes: Vec<_> = region.iter().filter_map(Polygon::bbox).collect();
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                let p = c.lonlat();
                bboxes.iter().any(|b| b.contains(&p)) && region_contains(region, &p)
            })
            .map(|(i, _)| i)
            .collect()
    }
}

/// Time steps run `years × months.len()`, cycling through `months` each year.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeAxis {
    pub start_year: i32,
    pub months: Vec<u8>,
    pub years: usize,
}

impl TimeAxis {
    pub fn len(&self) -> usize {
        self.years * self.months.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(year, month)` of time step `t`.
    pub fn date(&self, t: usize) -> (i32, u8) {
        let per_year = self.months.len();
        (self.start_year + (t / per_year) as i32, self.months[t % per_year])
    }
}

/// Set of calendar months (1–12).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<i64>", into = "Vec<u8>")]
pub struct MonthFilter(BTreeSet<u8>);

impl MonthFilter {
    pub fn all() -> Self {
        MonthFilter((1..=12).collect())
    }

    pub fn new<I: IntoIterator<Item = i64>>(months: I) -> Result<Self> {
        let mut set = BTreeSet::new();
        for m in months {
            if !(1..=12).contains(&m) {
                return Err(DataError::InvalidMonth(m));
            }
            set.insert(m as u8);
        }
        if set.is_empty() {
            return Err(DataError::EmptyMonthFilter);
        }
        Ok(MonthFilter(set))
    }

    pub fn single(month: u8) -> Result<Self> {
        Self::new([month as i64])
    }

    pub fn contains(&self, month: u8) -> bool {
        self.0.contains(&month)
    }

    pub fn months(&self) -> impl Iterator<Item = u8> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<i64>> for MonthFilter {
    type Error = DataError;
    fn try_from(v: Vec<i64>) -> Result<Self> {
        MonthFilter::new(v)
    }
}

impl From<MonthFilter> for Vec<u8> {
    fn from(m: MonthFilter) -> Self {
        m.0.into_iter().collect()
    }
}

/// Parses `all`, a single month, a comma list, or ranges, keeping the order
/// as written and dropping repeats. Ranges wrap across the year boundary, so
/// `10-5` is October through May.
pub fn parse_month_list(s: &str) -> Result<Vec<u8>> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("all") {
        return Ok((1..=12).collect());
    }
    let parse = |t: &str| {
        let m = t.trim().parse::<i64>().map_err(|_| DataError::InvalidMonth(-1))?;
        if !(1..=12).contains(&m) {
            return Err(DataError::InvalidMonth(m));
        }
        Ok(m as u8)
    };
    let mut months: Vec<u8> = Vec::new();
    let mut push = |m: u8| {
        if !months.contains(&m) {
            months.push(m);
        }
    };
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (mut m, b) = (parse(a)?, parse(b)?);
                loop {
                    push(m);
                    if m == b {
                        break;
                    }
                    m = m % 12 + 1;
                }
            }
            None => push(parse(part)?),
        }
    }
    if months.is_empty() {
        return Err(DataError::EmptyMonthFilter);
    }
    Ok(months)
}

impl FromStr for MonthFilter {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        MonthFilter::new(parse_month_list(s)?.into_iter().map(i64::from))
    }
}

/// The ensemble: one dense `[time][cell]` array per member.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleDataset {
    pub members: Vec<MemberId>,
    pub grid: SpatialGrid,
    pub time: TimeAxis,
    values: Vec<Vec<f64>>,
    normalized: bool,
}

impl EnsembleDataset {
    pub fn new(
        members: Vec<MemberId>,
        grid: SpatialGrid,
        time: TimeAxis,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if members.len() != values.len() {
            return Err(DataError::Invalid(format!(
                "{} members but {} value arrays",
                members.len(),
                values.len()
            )));
        }
        if time.months.is_empty() {
            return Err(DataError::EmptyMonthFilter);
        }
        for &m in &time.months {
            if !(1..=12).contains(&m) {
                return Err(DataError::InvalidMonth(m as i64));
            }
        }
        let expected = time.len() * grid.num_cells();
        for (member, v) in members.iter().zip(&values) {
            if v.len() != expected {
                return Err(DataError::LengthMismatch {
                    member: member.key(),
                    expected,
                    found: v.len(),
                });
            }
            if let Some(index) = v.iter().position(|x| !x.is_finite()) {
                return Err(DataError::NonFinite {
                    member: member.key(),
                    index,
                });
            }
        }
        Ok(EnsembleDataset {
            members,
            grid,
            time,
            values,
            normalized: false,
        })
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn num_cells(&self) -> usize {
        self.grid.num_cells()
    }

    pub fn num_steps(&self) -> usize {
        self.time.len()
    }

    pub fn member_values(&self, member: usize) -> &[f64] {
        &self.values[member]
    }

    /// Spatial pattern of `member` at time step `t`.
    pub fn step(&self, member: usize, t: usize) -> &[f64] {
        let n = self.num_cells();
        &self.values[member][t * n..(t + 1) * n]
    }

    pub fn member_index(&self, key: &str) -> Result<usize> {
        self.members
            .iter()
            .position(|m| m.key() == key)
            .ok_or_else(|| DataError::UnknownMember(key.to_string()))
    }

    pub fn find_member(&self, gcm: &str, ssp: &str) -> Option<usize> {
        self.members
            .iter()
            .position(|m| m.gcm == gcm && m.ssp.eq_ignore_ascii_case(ssp))
    }

    /// Time steps whose calendar month passes the filter.
    pub fn steps_in(&self, months: &MonthFilter) -> Vec<usize> {
        (0..self.num_steps())
            .filter(|&t| months.contains(self.time.date(t).1))
            .collect()
    }

    /// Pooled population standard deviation per dataset month, in
    /// `time.months` order.
    pub fn pooled_month_std(&self) -> Vec<(u8, f64)> {
        let per_year = self.time.months.len();
        self.time
            .months
            .iter()
            .enumerate()
            .map(|(slot, &month)| {
                let mut count = 0usize;
                let mut sum = 0.0;
                for member in 0..self.members.len() {
                    for t in (slot..self.num_steps()).step_by(per_year) {
                        sum += self.step(member, t).iter().sum::<f64>();
                        count += self.num_cells();
                    }
                }
                let mean = sum / count as f64;
                let mut ss = 0.0;
                for member in 0..self.members.len() {
                    for t in (slot..self.num_steps()).step_by(per_year) {
                        ss += self
                            .step(member, t)
                            .iter()
                            .map(|x| (x - mean) * (x - mean))
                            .sum::<f64>();
                    }
                }
                (month, (ss / count as f64).sqrt())
            })
            .collect()
    }

    /// Divides every value by the pooled standard deviation of its calendar
    /// month across members, years and cells.
    pub fn normalize_per_month(mut self) -> Result<Self> {
        if self.normalized {
            return Err(DataError::AlreadyNormalized);
        }
        let stds = self.pooled_month_std();
        if let Some(&(month, _)) = stds.iter().find(|(_, s)| *s == 0.0 || !s.is_finite()) {
            return Err(DataError::ZeroStd(month));
        }
        let per_year = self.time.months.len();
        let n = self.num_cells();
        for values in &mut self.values {
            for (t, row) in values.chunks_mut(n).enumerate() {
                let s = stds[t % per_year].1;
                row.iter_mut().for_each(|x| *x /= s);
            }
        }
        self.normalized = true;
        Ok(self)
    }

    /// Marks the values as already normalized, e.g. after loading a dataset
    /// written post-normalization.
    pub fn assume_normalized(mut self) -> Self {
        self.normalized = true;
        self
    }

    /// Spatial mean of one time step.
    pub fn spatial_mean(&self, member: usize, t: usize) -> f64 {
        let row = self.step(member, t);
        row.iter().sum::<f64>() / row.len() as f64
    }
}

/// Where a flattened sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOrigin {
    pub member: usize,
    pub step: usize,
    pub year: i32,
    pub month: u8,
}

/// Row-major samples for SOM training. Rows borrow from the dataset when
/// flattened from one.
#[derive(Debug, Clone)]
pub struct SampleMatrix<'a> {
    dim: usize,
    rows: Vec<Cow<'a, [f64]>>,
    origins: Vec<Option<SampleOrigin>>,
}

impl<'a> SampleMatrix<'a> {
    /// Owned samples without provenance. Every row must share one length.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<SampleMatrix<'static>> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(DataError::PatternLength {
                expected: dim,
                found: bad.len(),
            });
        }
        let n = rows.len();
        Ok(SampleMatrix {
            dim,
            rows: rows.into_iter().map(Cow::Owned).collect(),
            origins: vec![None; n],
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn origin(&self, i: usize) -> Option<SampleOrigin> {
        self.origins[i]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.iter().map(|r| &r[..])
    }
}

/// One row per (member, time step) whose month passes the filter, ordered by
/// member then time.
pub fn flatten_samples<'a>(
    dataset: &'a EnsembleDataset,
    months: &MonthFilter,
) -> Result<SampleMatrix<'a>> {
    if months.is_empty() {
        return Err(DataError::EmptyMonthFilter);
    }
    if !dataset.is_normalized() {
        return Err(DataError::NotNormalized);
    }
    if !dataset.time.months.iter().any(|&m| months.contains(m)) {
        return Err(DataError::MonthsNotInDataset);
    }
    let steps = dataset.steps_in(months);
    let mut rows = Vec::with_capacity(steps.len() * dataset.members.len());
    let mut origins = Vec::with_capacity(rows.capacity());
    for member in 0..dataset.members.len() {
        for &t in &steps {
            let (year, month) = dataset.time.date(t);
            rows.push(Cow::Borrowed(dataset.step(member, t)));
            origins.push(Some(SampleOrigin {
                member,
                step: t,
                year,
                month,
            }));
        }
    }
    Ok(SampleMatrix {
        dim: dataset.num_cells(),
        rows,
        origins,
    })
}

/// Mean of `pattern` over the cells whose centres fall inside `region`.
pub fn region_mean<T>(pattern: &[T], region: &[Polygon], grid: &SpatialGrid) -> Result<f64>
where
    T: Copy + Into<f64>,
{
    let cells = grid.cells_in_region(region);
    mean_over_cells(pattern, &cells, grid.num_cells())
}

/// Mean over a precomputed cell selection (see [`SpatialGrid::cells_in_region`]).
pub fn mean_over_cells<T>(pattern: &[T], cells: &[usize], num_cells: usize) -> Result<f64>
where
    T: Copy + Into<f64>,
{
    if pattern.len() != num_cells {
        return Err(DataError::PatternLength {
            expected: num_cells,
            found: pattern.len(),
        });
    }
    if cells.is_empty() {
        return Err(DataError::EmptyRegion);
    }
    Ok(cells.iter().map(|&c| pattern[c].into()).sum::<f64>() / cells.len() as f64)
}
