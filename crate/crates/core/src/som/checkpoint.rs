//! Checkpoint layout: `SOMCKPT1` magic, little-endian `u32` header length,
//! JSON header `{rows, cols, dim, config}`, then the node-major weight block as
//! little-endian `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Result, SomConfig, SomError, SomGrid};

const MAGIC: &[u8; 8] = b"SOMCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub config: SomConfig,
}

impl SomGrid {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            rows: self.rows(),
            cols: self.cols(),
            dim: self.dim,
            config: self.config.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + json.len() + 4 * self.weights.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<SomGrid> {
        let bad = |m: &str| SomError::Checkpoint(m.to_string());
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("not a SOM checkpoint"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| SomError::Checkpoint(e.to_string()))?;
        if header.rows != header.config.rows || header.cols != header.config.cols {
            return Err(bad("header and config disagree on lattice size"));
        }
        let block = &bytes[12 + len..];
        let expected = header.rows * header.cols * header.dim;
        if block.len() != 4 * expected {
            return Err(SomError::Checkpoint(format!(
                "weight block holds {} bytes, expected {}",
                block.len(),
                4 * expected
            )));
        }
        let weights = block
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        SomGrid::from_weights(header.config, header.dim, weights)
    }
}

pub fn save_checkpoint(grid: &SomGrid, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, grid.to_checkpoint_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SomGrid> {
    SomGrid::from_checkpoint_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let c = SomConfig {
            rows: 2,
            cols: 3,
            seed: 4,
            ..Default::default()
        };
        let w: Vec<f32> = (0..12).map(|i| i as f32 * 0.1 - 0.37).collect();
        let g = SomGrid::from_weights(c, 2, w).unwrap();
        let bytes = g.to_checkpoint_bytes();
        let back = SomGrid::from_checkpoint_bytes(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.to_checkpoint_bytes(), bytes);
        assert!(SomGrid::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
