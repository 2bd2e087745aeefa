//! Loaded project state: the normalized ensemble, the trained SOM with its
//! BMU index, the layout and annotations.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use somatlas::analysis::{self, AnalysisContext, AnalysisRequest};
use somatlas::annotate::Annotation;
use somatlas::data::{flatten_samples, load_counties, load_ensemble, synthetic_counties, CountyIndex, EnsembleDataset};
use somatlas::distribution::BmuIndex;
use somatlas::embed::Embedding;
use somatlas::project::{load_project, save_project, Project, ProjectSettings};
use somatlas::som::{metrics, SomGrid, SomMetrics};

use crate::error::{Result, ServiceError};

/// Resolves `p` against the directory of the project file.
pub fn resolve_path(project_path: Option<&Path>, p: &Path) -> PathBuf {
    match project_path.and_then(Path::parent) {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

/// Loads and normalizes an ensemble directory.
pub fn open_dataset(dir: &Path) -> Result<EnsembleDataset> {
    Ok(load_ensemble(dir)?.normalize_per_month()?)
}

#[derive(Clone)]
pub struct Workspace {
    pub path: Option<PathBuf>,
    pub dataset: Arc<EnsembleDataset>,
    /// County outlines; a 3 × 3 stand-in tiling when the settings name none.
    pub counties: Arc<CountyIndex>,
    pub settings: ProjectSettings,
    pub som: Option<Arc<SomGrid>>,
    pub metrics: Option<SomMetrics>,
    pub index: Option<Arc<BmuIndex>>,
    pub embedding: Option<Arc<Embedding>>,
    pub annotations: Arc<Vec<Annotation>>,
    pub next_annotation_id: u64,
    pub embedding_version: u64,
    pub annotation_version: u64,
}

/// Immutable view used by analysis requests.
#[derive(Clone)]
pub struct AnalysisSnapshot {
    pub dataset: Arc<EnsembleDataset>,
    pub index: Arc<BmuIndex>,
    pub embedding: Arc<Embedding>,
    pub annotations: Arc<Vec<Annotation>>,
    pub embedding_version: u64,
    pub annotation_version: u64,
}

impl AnalysisSnapshot {
    pub fn digest(&self, req: &AnalysisRequest) -> String {
        analysis::request_digest(req, self.embedding_version, self.annotation_version)
    }

    /// Encoded response body.
    pub fn run(&self, req: &AnalysisRequest) -> Result<Vec<u8>> {
        let ctx = AnalysisContext {
            dataset: &self.dataset,
            index: &self.index,
            embedding: &self.embedding,
            annotations: &self.annotations,
        };
        Ok(analysis::encode(&analysis::run(&ctx, req)?))
    }
}

impl Workspace {
    /// Builds the derived state (BMU index, metrics) for a project over a
    /// normalized dataset.
    pub fn new(project: Project, dataset: EnsembleDataset, counties: Option<CountyIndex>, path: Option<PathBuf>) -> Result<Self> {
        project.check()?;
        if !dataset.is_normalized() {
            return Err(ServiceError::Invalid("dataset must be normalized".into()));
        }
        let counties = counties.unwrap_or_else(|| synthetic_counties(&dataset.grid));
        let mut ws = Workspace {
            path,
            dataset: Arc::new(dataset),
            counties: Arc::new(counties),
            settings: project.settings,
            som: None,
            metrics: None,
            index: None,
            embedding: project.embedding.map(Arc::new),
            annotations: Arc::new(project.annotations),
            next_annotation_id: project.next_annotation_id,
            embedding_version: 0,
            annotation_version: 0,
        };
        if let Some(grid) = project.som {
            let (index, metrics) = derive(&ws.dataset, &ws.settings, &grid)?;
            ws.index = Some(Arc::new(index));
            ws.metrics = Some(metrics);
            ws.som = Some(Arc::new(grid));
        }
        Ok(ws)
    }

    /// Opens a project file together with the dataset and counties its
    /// settings reference.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let project = load_project(path)?;
        let dir = project
            .settings
            .dataset
            .clone()
            .ok_or_else(|| ServiceError::Invalid("project names no dataset".into()))?;
        let dataset = open_dataset(&resolve_path(Some(path), &dir))?;
        let counties = match &project.settings.counties {
            Some(c) => Some(load_counties(resolve_path(Some(path), c))?),
            None => None,
        };
        Self::new(project, dataset, counties, Some(path.to_path_buf()))
    }

    pub fn to_project(&self) -> Project {
        Project {
            settings: self.settings.clone(),
            som: self.som.as_deref().cloned(),
            embedding: self.embedding.as_deref().cloned(),
            annotations: self.annotations.to_vec(),
            next_annotation_id: self.next_annotation_id,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_project(&self.to_project(), path)?)
    }

    pub fn snapshot(&self) -> Result<AnalysisSnapshot> {
        let (Some(index), Some(embedding)) = (&self.index, &self.embedding) else {
            return Err(ServiceError::no_som());
        };
        Ok(AnalysisSnapshot {
            dataset: self.dataset.clone(),
            index: index.clone(),
            embedding: embedding.clone(),
            annotations: self.annotations.clone(),
            embedding_version: self.embedding_version,
            annotation_version: self.annotation_version,
        })
    }

    /// Encoded response for one analysis request.
    pub fn analyze(&self, req: &AnalysisRequest) -> Result<Vec<u8>> {
        self.snapshot()?.run(req)
    }
}

/// BMU index and quality metrics of `grid` over the training months.
pub fn derive(dataset: &EnsembleDataset, settings: &ProjectSettings, grid: &SomGrid) -> Result<(BmuIndex, SomMetrics)> {
    let index = BmuIndex::compute(dataset, grid).map_err(|e| ServiceError::Invalid(e.to_string()))?;
    let samples = flatten_samples(dataset, &settings.training_months)?;
    let m = metrics(grid, &samples)?;
    Ok((index, m))
}
