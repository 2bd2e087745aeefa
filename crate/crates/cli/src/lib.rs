//! Batch entry points behind the `somatlas` binary.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use somatlas::annotate::{ChatClient, LlmClient, StubLlm};
use somatlas::data::{random_archetypes, DataError, SampleMatrix, SyntheticSpec};
use somatlas::embed::EmbedError;
use somatlas::project::ProjectError;
use somatlas::som::{metrics, train_som, SomConfig, SomError};
use somatlas_service::{ErrorEnvelope, ServiceError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Som(#[from] SomError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Project(#[from] ProjectError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn envelope(&self) -> ErrorEnvelope {
        match self {
            CliError::Service(e) => e.envelope(),
            CliError::Io { .. } | CliError::Csv(_) | CliError::Json(_) => ErrorEnvelope {
                code: "io".into(),
                message: self.to_string(),
            },
            _ => ErrorEnvelope {
                code: "invalid".into(),
                message: self.to_string(),
            },
        }
    }
}

/// One cell of a kR × kS sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "kR")]
    pub k_r: f64,
    #[serde(rename = "kS")]
    pub k_s: f64,
    pub explained_variance: f64,
    pub mean_smoothness: f64,
    pub quantization_error: f64,
    pub topographic_error: f64,
}

/// Trains one SOM per (kR, kS) pair on a pool of `jobs` threads. Rows come
/// back sorted by (kR, kS) whatever the completion order.
pub fn sweep(samples: &SampleMatrix<'_>, base: &SomConfig, kr: &[f64], ks: &[f64], jobs: usize) -> Result<Vec<SweepRow>> {
    if kr.is_empty() || ks.is_empty() {
        return Err(CliError::Usage("kR and kS lists must not be empty".into()));
    }
    let mut cells: Vec<(f64, f64)> = kr.iter().flat_map(|&r| ks.iter().map(move |&s| (r, s))).collect();
    cells.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    cells.dedup();
    for &(k_r, k_s) in &cells {
        SomConfig { k_r, k_s, ..base.clone() }.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let rows: Vec<Result<SweepRow>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(k_r, k_s)| {
                let config = SomConfig { k_r, k_s, ..base.clone() };
                let grid = train_som(samples, &config, None)?;
                let m = metrics(&grid, samples)?;
                Ok(SweepRow {
                    k_r,
                    k_s,
                    explained_variance: m.explained_variance,
                    mean_smoothness: m.mean_smoothness,
                    quantization_error: m.quantization_error,
                    topographic_error: m.topographic_error,
                })
            })
            .collect()
    });
    rows.into_iter().collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(CliError::io(Path::new("<csv>")))?;
    Ok(())
}

/// Two-archetype ensemble: every GCM has a historical run near an even mix
/// and SSP runs that lean towards one archetype, alternating by GCM.
pub fn synthetic_spec(rows: usize, cols: usize, years: usize, gcms: usize, noise: f64, seed: u64) -> SyntheticSpec {
    let mut spec = SyntheticSpec::new(rows, cols, years, random_archetypes(2, rows * cols, seed)).noise(noise);
    for g in 0..gcms {
        let name = format!("gcm{g}");
        let lean = if g % 2 == 0 { [0.8, 0.2] } else { [0.2, 0.8] };
        spec = spec
            .member(&name, "historical", vec![0.5, 0.5])
            .member(&name, "ssp245", vec![(0.5 + lean[0]) / 2.0, (0.5 + lean[1]) / 2.0])
            .member(&name, "ssp585", lean.to_vec());
    }
    spec
}

/// The stub when asked for or when no API key is configured, else the
/// environment-configured chat client.
pub fn llm_client(stub: bool) -> Arc<dyn LlmClient> {
    if stub {
        return Arc::new(StubLlm::new());
    }
    match ChatClient::from_env() {
        Ok(c) => Arc::new(c),
        Err(e) => {
            log::warn!("{e}; using the offline stub");
            Arc::new(StubLlm::new())
        }
    }
}
