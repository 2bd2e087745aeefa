//! HTTP API over one loaded project: SOM training jobs, the node layout and
//! its anchors, annotations, LLM queries and the analysis endpoints.

mod error;
mod jobs;
mod routes;
mod workspace;

pub use error::{ErrorEnvelope, Result, ServiceError};
pub use jobs::{JobState, JobStatus, Jobs};
pub use routes::{forcings_request, router, runs_request, AnchorEntry, EmbeddingView};
pub use workspace::{derive, open_dataset, resolve_path, AnalysisSnapshot, Workspace};

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard, RwLock, RwLockReadGuard, RwLockWriteGuard};

use axum::body::Bytes;
use somatlas::annotate::LlmClient;
use tokio::sync::Semaphore;

struct Shared {
    workspace: RwLock<Workspace>,
    jobs: Mutex<Jobs>,
    cache: Mutex<HashMap<String, Bytes>>,
    llm: Arc<dyn LlmClient>,
    /// Bumped by every anchor update; a re-embed only commits while it
    /// still holds the latest generation.
    anchor_generation: AtomicU64,
    workers: Semaphore,
}

#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    pub fn new(workspace: Workspace, llm: Arc<dyn LlmClient>) -> Self {
        let workers = std::thread::available_parallelism().map_or(4, |n| n.get());
        AppState(Arc::new(Shared {
            workspace: RwLock::new(workspace),
            jobs: Mutex::new(Jobs::default()),
            cache: Mutex::new(HashMap::new()),
            llm,
            anchor_generation: AtomicU64::new(0),
            workers: Semaphore::new(workers),
        }))
    }

    /// Cheap copy of the current state.
    pub fn workspace(&self) -> Workspace {
        self.read().clone()
    }

    pub fn job(&self, id: u64) -> Option<JobStatus> {
        self.jobs().get(id).cloned()
    }

    fn read(&self) -> RwLockReadGuard<'_, Workspace> {
        self.0.workspace.read().expect("workspace lock")
    }

    fn write(&self) -> RwLockWriteGuard<'_, Workspace> {
        self.0.workspace.write().expect("workspace lock")
    }

    fn jobs(&self) -> MutexGuard<'_, Jobs> {
        self.0.jobs.lock().expect("job lock")
    }

    fn cache(&self) -> MutexGuard<'_, HashMap<String, Bytes>> {
        self.0.cache.lock().expect("cache lock")
    }

    fn next_anchor_generation(&self) -> u64 {
        self.0.anchor_generation.fetch_add(1, Ordering::SeqCst) + 1
    }

    fn anchor_generation(&self) -> u64 {
        self.0.anchor_generation.load(Ordering::SeqCst)
    }

    /// Runs blocking work on the bounded worker pool.
    async fn blocking<T, F>(&self, f: F) -> Result<T>
    where
        T: Send + 'static,
        F: FnOnce() -> Result<T> + Send + 'static,
    {
        let _permit = self.0.workers.acquire().await.map_err(|e| ServiceError::Internal(e.to_string()))?;
        tokio::task::spawn_blocking(f)
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))?
    }
}

/// Binds `addr` and serves until the process exits.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
