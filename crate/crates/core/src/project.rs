//! Project files: one JSON document plus an adjacent SOM checkpoint
//! (`<name>.som`). Analysis caches are never persisted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotate::{AnnotateError, Annotation};
use crate::data::MonthFilter;
use crate::embed::{Embedding, MdeConfig};
use crate::geometry::Point;
use crate::som::{SomConfig, SomError, SomGrid};

pub const PROJECT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("unsupported project version {found:?} (expected {PROJECT_VERSION})")]
    Version { found: Option<u64> },
    #[error("corrupt project file: {0}")]
    Corrupt(String),
    #[error("inconsistent project: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Som(#[from] SomError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ProjectError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectSettings {
    /// Ensemble directory.
    pub dataset: Option<PathBuf>,
    /// County boundary GeoJSON.
    #[serde(default)]
    pub counties: Option<PathBuf>,
    pub som: SomConfig,
    /// Months the SOM trains on.
    pub training_months: MonthFilter,
    pub mde: MdeConfig,
}

impl Default for ProjectSettings {
    fn default() -> Self {
        ProjectSettings {
            dataset: None,
            counties: None,
            som: SomConfig::default(),
            training_months: MonthFilter::all(),
            mde: MdeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Project {
    pub settings: ProjectSettings,
    pub som: Option<SomGrid>,
    pub embedding: Option<Embedding>,
    pub annotations: Vec<Annotation>,
    pub next_annotation_id: u64,
}

#[derive(Serialize, Deserialize)]
struct ProjectFile {
    version: u32,
    settings: ProjectSettings,
    /// SHA-256 of the adjacent checkpoint, absent without a SOM.
    som_sha256: Option<String>,
    embedding: Option<Embedding>,
    annotations: Vec<Annotation>,
    next_annotation_id: u64,
}

impl Project {
    pub fn new(settings: ProjectSettings) -> Self {
        Project {
            settings,
            ..Default::default()
        }
    }

    /// Validates and stores a new annotation with the next free id.
    pub fn add_annotation(&mut self, label: String, vertices: Vec<Point>) -> Result<&Annotation> {
        let id = self.next_annotation_id;
        let a = Annotation::new(id, label, vertices, id)?;
        self.next_annotation_id += 1;
        self.annotations.push(a);
        Ok(self.annotations.last().unwrap())
    }

    pub fn annotation(&self, id: u64) -> Option<&Annotation> {
        self.annotations.iter().find(|a| a.id == id)
    }

    /// Checks that the embedding, if any, belongs to the SOM.
    pub fn check(&self) -> Result<()> {
        match (&self.som, &self.embedding) {
            (None, Some(_)) => Err(ProjectError::Inconsistent("embedding without a SOM".into())),
            (Some(s), Some(e)) if s.num_nodes() != e.num_nodes() => Err(ProjectError::Inconsistent(format!(
                "embedding has {} nodes, SOM has {}",
                e.num_nodes(),
                s.num_nodes()
            ))),
            _ => Ok(()),
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `<project>.som` next to the project file.
pub fn checkpoint_path(path: &Path) -> PathBuf {
    path.with_extension("som")
}

pub fn save_project(project: &Project, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    project.check()?;
    let ckpt = checkpoint_path(path);
    let som_sha256 = match &project.som {
        Some(grid) => {
            let bytes = grid.to_checkpoint_bytes();
            std::fs::write(&ckpt, &bytes)?;
            Some(sha256_hex(&bytes))
        }
        None => None,
    };
    let file = ProjectFile {
        version: PROJECT_VERSION,
        settings: project.settings.clone(),
        som_sha256,
        embedding: project.embedding.clone(),
        annotations: project.annotations.clone(),
        next_annotation_id: project.next_annotation_id,
    };
    let mut text = serde_json::to_string_pretty(&file).map_err(|e| ProjectError::Corrupt(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_project(path: impl AsRef<Path>) -> Result<Project> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| ProjectError::Corrupt(e.to_string()))?;
    let found = value.get("version").and_then(serde_json::Value::as_u64);
    if found != Some(PROJECT_VERSION as u64) {
        return Err(ProjectError::Version { found });
    }
    let file: ProjectFile = serde_json::from_value(value).map_err(|e| ProjectError::Corrupt(e.to_string()))?;
    let som = match &file.som_sha256 {
        Some(digest) => {
            let bytes = std::fs::read(checkpoint_path(path))?;
            if &sha256_hex(&bytes) != digest {
                return Err(ProjectError::Corrupt("SOM checkpoint does not match the project file".into()));
            }
            Some(SomGrid::from_checkpoint_bytes(&bytes)?)
        }
        None => None,
    };
    for a in &file.annotations {
        a.validate()?;
    }
    let project = Project {
        settings: file.settings,
        som,
        embedding: file.embedding,
        annotations: file.annotations,
        next_annotation_id: file.next_annotation_id,
    };
    project.check()?;
    Ok(project)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{embed_grid, MdeConfig};

    fn sample() -> Project {
        let config = SomConfig {
            rows: 3,
            cols: 4,
            ..Default::default()
        };
        let weights: Vec<f32> = (0..12 * 5).map(|i| (i as f32 * 0.37).sin()).collect();
        let grid = SomGrid::from_weights(config, 5, weights).unwrap();
        let mut embedding = embed_grid(&grid, &MdeConfig::default()).unwrap();
        embedding.anchors.insert(2, [0.1, 1.0 / 3.0]);
        let mut p = Project::new(ProjectSettings {
            dataset: Some("ensemble".into()),
            training_months: "10-5".parse().unwrap(),
            ..Default::default()
        });
        p.som = Some(grid);
        p.embedding = Some(embedding);
        p.add_annotation("wet".into(), vec![[0.1, 0.2], [1.0 / 3.0, 0.0], [0.7, 0.9]]).unwrap();
        p.add_annotation("dry".into(), vec![[-1.0, -1.0], [0.0, -1.0], [0.0, 0.0], [-1.0, 0.0]]).unwrap();
        p
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
        let p = sample();
        save_project(&p, &a).unwrap();
        let loaded = load_project(&a).unwrap();
        save_project(&loaded, &b).unwrap();
        assert_eq!(std::fs::read_to_string(&a).unwrap(), std::fs::read_to_string(&b).unwrap());
        assert_eq!(std::fs::read(checkpoint_path(&a)).unwrap(), std::fs::read(checkpoint_path(&b)).unwrap());
        assert_eq!(loaded.annotations, p.annotations);
        assert_eq!(loaded.som, p.som);
        assert_eq!(loaded.embedding.as_ref().unwrap().positions, p.embedding.as_ref().unwrap().positions);
        assert_eq!(loaded.next_annotation_id, 2);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_project(&sample(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 99");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_project(&path), Err(ProjectError::Version { found: Some(99) })));
        std::fs::write(&path, "{}").unwrap();
        assert!(matches!(load_project(&path), Err(ProjectError::Version { found: None })));
        std::fs::write(&path, "not json").unwrap();
        assert!(matches!(load_project(&path), Err(ProjectError::Corrupt(_))));
    }

    #[test]
    fn swapped_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = sample();
        save_project(&p, &path).unwrap();
        let mut other = p.som.clone().unwrap();
        other.config.seed = 99;
        std::fs::write(checkpoint_path(&path), other.to_checkpoint_bytes()).unwrap();
        assert!(matches!(load_project(&path), Err(ProjectError::Corrupt(_))));
    }

    #[test]
    fn embedding_requires_som() {
        let mut p = sample();
        p.som = None;
        assert!(matches!(p.check(), Err(ProjectError::Inconsistent(_))));
    }

    #[test]
    fn empty_project_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.json");
        save_project(&Project::default(), &path).unwrap();
        assert_eq!(load_project(&path).unwrap(), Project::default());
        assert!(!checkpoint_path(&path).exists());
    }
}
