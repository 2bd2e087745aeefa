//! Ensemble directory format: `manifest.json` plus one raw little-endian
//! `f32` array per member laid out `[time][cell]`.

use std::fs;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{DataError, EnsembleDataset, MemberId, Result, SpatialGrid, TimeAxis};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub members: Vec<ManifestMember>,
    pub grid: ManifestGrid,
    pub time: ManifestTime,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestMember {
    pub gcm: String,
    pub ssp: String,
    pub variant: String,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestGrid {
    pub rows: usize,
    pub cols: usize,
    pub lats: Vec<f64>,
    pub lons: Vec<f64>,
    /// Row-major bitset, least significant bit first within each byte.
    pub valid_mask: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestTime {
    pub start_year: i32,
    pub months: Vec<u8>,
    /// Number of years. When absent it is inferred from the first member file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub years: Option<usize>,
}

pub fn encode_mask(valid: &[bool]) -> String {
    let mut bytes = vec![0u8; valid.len().div_ceil(8)];
    for (i, _) in valid.iter().enumerate().filter(|(_, v)| **v) {
        bytes[i / 8] |= 1 << (i % 8);
    }
    BASE64.encode(bytes)
}

pub fn decode_mask(encoded: &str, len: usize) -> Result<Vec<bool>> {
    let bytes = BASE64
        .decode(encoded.trim())
        .map_err(|e| DataError::Manifest(format!("valid_mask: {e}")))?;
    if bytes.len() < len.div_ceil(8) {
        return Err(DataError::Manifest(format!(
            "valid_mask has {} bytes, need {}",
            bytes.len(),
            len.div_ceil(8)
        )));
    }
    Ok((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_f32_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(DataError::Manifest(format!(
            "{} is not a whole number of f32 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

/// Loads an ensemble directory. Member order follows the manifest.
pub fn load_ensemble(dir: impl AsRef<Path>) -> Result<EnsembleDataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(DataError::MissingManifest(manifest_path));
    }
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    let g = &manifest.grid;
    if g.lats.len() != g.rows || g.lons.len() != g.cols {
        return Err(DataError::Manifest(format!(
            "axes have {}x{} entries for a {}x{} grid",
            g.lats.len(),
            g.lons.len(),
            g.rows,
            g.cols
        )));
    }
    let valid = decode_mask(&g.valid_mask, g.rows * g.cols)?;
    let grid = SpatialGrid::new(g.lats.clone(), g.lons.clone(), &valid)?;
    let per_year = manifest.time.months.len();
    if per_year == 0 {
        return Err(DataError::EmptyMonthFilter);
    }

    let mut members = Vec::with_capacity(manifest.members.len());
    let mut values = Vec::with_capacity(manifest.members.len());
    let mut years = manifest.time.years;
    for m in &manifest.members {
        let id = MemberId::new(&m.gcm, &m.ssp, &m.variant);
        let path: PathBuf = dir.join(&m.file);
        let data = read_f32_file(&path)?;
        let years_here = *years.get_or_insert(data.len() / (grid.num_cells() * per_year));
        let expected = years_here * per_year * grid.num_cells();
        if data.len() != expected {
            return Err(DataError::LengthMismatch {
                member: id.key(),
                expected,
                found: data.len(),
            });
        }
        members.push(id);
        values.push(data);
    }
    let time = TimeAxis {
        start_year: manifest.time.start_year,
        months: manifest.time.months.clone(),
        years: years.unwrap_or(0),
    };
    EnsembleDataset::new(members, grid, time, values)
}

fn member_file_name(id: &MemberId) -> String {
    let clean = |s: &str| {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect::<String>()
    };
    format!("{}_{}_{}.f32", clean(&id.gcm), clean(&id.ssp), clean(&id.variant))
}

/// Writes the dataset in the directory format read by [`load_ensemble`].
/// Values are stored as `f32`.
pub fn save_ensemble(dataset: &EnsembleDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut members = Vec::new();
    for (i, id) in dataset.members.iter().enumerate() {
        let file = member_file_name(id);
        let bytes: Vec<u8> = dataset
            .member_values(i)
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(io_err(&path))?;
        members.push(ManifestMember {
            gcm: id.gcm.clone(),
            ssp: id.ssp.clone(),
            variant: id.variant.clone(),
            file,
        });
    }
    let grid = &dataset.grid;
    let manifest = Manifest {
        members,
        grid: ManifestGrid {
            rows: grid.rows,
            cols: grid.cols,
            lats: grid.lats.clone(),
            lons: grid.lons.clone(),
            valid_mask: encode_mask(&grid.valid_mask()),
        },
        time: ManifestTime {
            start_year: dataset.time.start_year,
            months: dataset.time.months.clone(),
            years: Some(dataset.time.years),
        },
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| DataError::Manifest(e.to_string()))?;
    fs::write(&path, text).map_err(io_err(&path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_dataset(members: usize, years: usize, cells: usize) -> EnsembleDataset {
        let grid = SpatialGrid::full(vec![35.0], (0..cells).map(|c| -120.0 + c as f64).collect())
            .unwrap();
        let time = TimeAxis {
            start_year: 1990,
            months: (1..=12).collect(),
            years,
        };
        let ids = (0..members)
            .map(|i| MemberId::new(format!("GCM{i}"), "historical", "r1i1p1f1"))
            .collect();
        let values = (0..members)
            .map(|m| {
                (0..time.len() * cells)
                    .map(|k| ((k * 7 + m * 13) % 17) as f64 - 8.0)
                    .collect()
            })
            .collect();
        EnsembleDataset::new(ids, grid, time, values).unwrap()
    }

    #[test]
    fn two_members_twelve_steps_four_cells() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(2, 1, 4);
        save_ensemble(&ds, dir.path()).unwrap();
        let back = load_ensemble(dir.path()).unwrap();
        assert_eq!(back.members.len(), 2);
        assert_eq!(back.member_values(0).len(), 48);
        assert_eq!(back, ds);
    }

    #[test]
    fn truncated_member_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(2, 1, 4);
        save_ensemble(&ds, dir.path()).unwrap();
        let file = dir.path().join(member_file_name(&ds.members[1]));
        let bytes = fs::read(&file).unwrap();
        fs::write(&file, &bytes[..bytes.len() - 4]).unwrap();
        let err = load_ensemble(dir.path()).unwrap_err();
        assert!(err.to_string().contains("member array length mismatch"), "{err}");
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_ensemble(dir.path()),
            Err(DataError::MissingManifest(_))
        ));
    }

    #[test]
    fn non_finite_value_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = small_dataset(1, 1, 2);
        save_ensemble(&ds, dir.path()).unwrap();
        let file = dir.path().join(member_file_name(&ds.members[0]));
        let mut bytes = fs::read(&file).unwrap();
        bytes[8..12].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&file, bytes).unwrap();
        assert!(matches!(
            load_ensemble(dir.path()),
            Err(DataError::NonFinite { index: 2, .. })
        ));
    }

    #[test]
    fn mask_drops_invalid_cells() {
        let valid = vec![true, false, true, true, false, true];
        let decoded = decode_mask(&encode_mask(&valid), valid.len()).unwrap();
        assert_eq!(decoded, valid);
        let grid = SpatialGrid::new(vec![1.0, 2.0], vec![10.0, 11.0, 12.0], &valid).unwrap();
        assert_eq!(grid.num_cells(), 4);
        assert_eq!(grid.raster_position(1), (0, 2));
        assert_eq!(grid.cell_at(0, 1), None);
    }
}
