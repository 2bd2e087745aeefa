use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use somatlas::analysis::{
    AnalysisRequest, DistributionRequest, ForcingTimelineRequest, PairRequest, RunTimelineRequest, SideBySideRequest,
};
use somatlas::annotate::{
    apply_filter, bucket_nodes, parse_forward_query, summarize_region, Annotation, ForwardQuery, NodeSummaryBuckets,
    RegionSummary, DEFAULT_CUTOFFS, DEFAULT_SAMPLES,
};
use somatlas::cluster::ClusterParams;
use somatlas::compare::{BootstrapParams, GroundCost};
use somatlas::data::{flatten_samples, EnsembleDataset, MonthFilter};
use somatlas::distribution::BmuIndex;
use somatlas::embed::{embed_grid, reoptimize, EmbedStatus, Embedding};
use somatlas::geometry::Point;
use somatlas::project::ProjectSettings;
use somatlas::som::{metrics, train_som, SomConfig, SomError, SomMetrics, TrainProgress};

use crate::error::{Result, ServiceError};
use crate::jobs::{JobState, JobStatus};
use crate::workspace::Workspace;
use crate::AppState;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/som/train", post(train))
        .route("/jobs/{id}", get(job))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .route("/som/nodes", get(nodes))
        .route("/som/node/{i}", get(node))
        .route("/embedding/anchors", get(get_anchors).put(put_anchors))
        .route("/annotations", get(list_annotations).post(create_annotation))
        .route(
            "/annotations/{id}",
            get(get_annotation).put(update_annotation).delete(delete_annotation),
        )
        .route("/llm/forward", post(llm_forward))
        .route("/llm/backward", post(llm_backward))
        .route("/analysis/distribution", post(analysis_distribution))
        .route("/analysis/side-by-side", post(analysis_side_by_side))
        .route("/analysis/vector-field", post(analysis_vector_field))
        .route("/analysis/transitions", post(analysis_transitions))
        .route("/analysis/timeline/runs", get(timeline_runs))
        .route("/analysis/timeline/forcings", get(timeline_forcings))
        .route("/project", get(get_project).put(put_project))
        .fallback(|| async { ServiceError::NotFound("no such route".into()) })
        .with_state(state)
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Invalid(format!("invalid body: {e}")))
}

fn parse_id(raw: &str, what: &str) -> Result<u64> {
    raw.parse().map_err(|_| ServiceError::NotFound(format!("unknown {what} {raw}")))
}

fn json_bytes(bytes: Bytes) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes).into_response()
}

// Training jobs

#[derive(Debug, Default, Deserialize)]
#[serde(default)]
struct TrainRequest {
    som: Option<SomConfig>,
    /// Month expression; defaults to the project's training months.
    months: Option<String>,
}

async fn train(State(s): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<serde_json::Value>)> {
    let req: TrainRequest = if body.is_empty() { TrainRequest::default() } else { parse(&body)? };
    let (config, months, dataset) = {
        let ws = s.read();
        let months = match &req.months {
            Some(m) => m.parse::<MonthFilter>()?,
            None => ws.settings.training_months.clone(),
        };
        (req.som.unwrap_or_else(|| ws.settings.som.clone()), months, ws.dataset.clone())
    };
    config.validate()?;
    let (id, cancel) = s.jobs().start()?;
    let worker = s.clone();
    tokio::task::spawn_blocking(move || worker.run_training(id, &cancel, dataset, config, months));
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": id }))))
}

struct Trained {
    grid: somatlas::som::SomGrid,
    index: BmuIndex,
    metrics: SomMetrics,
    embedding: Embedding,
}

impl AppState {
    fn update_job(&self, id: u64, state: JobState, progress: Option<f64>, message: Option<String>) {
        self.jobs().update(id, state, progress, message);
    }

    fn run_training(
        &self,
        id: u64,
        cancel: &AtomicBool,
        dataset: Arc<EnsembleDataset>,
        config: SomConfig,
        months: MonthFilter,
    ) {
        self.update_job(id, JobState::Running, Some(0.0), None);
        let mde = self.read().settings.mde;
        let result = (|| -> Result<Option<Trained>> {
            let samples = flatten_samples(&dataset, &months)?;
            let mut observer = |p: &TrainProgress| {
                let frac = 0.9 * p.iteration as f64 / p.iterations as f64;
                self.update_job(id, JobState::Running, Some(frac), None);
                !cancel.load(Ordering::Relaxed)
            };
            let grid = match train_som(&samples, &config, Some(&mut observer)) {
                Err(SomError::Cancelled) => return Ok(None),
                r => r?,
            };
            let index = BmuIndex::compute(&dataset, &grid).map_err(|e| ServiceError::Internal(e.to_string()))?;
            let metrics = metrics(&grid, &samples)?;
            let embedding = embed_grid(&grid, &mde)?;
            Ok(Some(Trained {
                grid,
                index,
                metrics,
                embedding,
            }))
        })();
        match result {
            Ok(Some(t)) if !cancel.load(Ordering::Relaxed) => {
                let mut ws = self.write();
                if !Arc::ptr_eq(&ws.dataset, &dataset) {
                    drop(ws);
                    self.update_job(id, JobState::Failed, None, Some("project was reloaded during training".into()));
                    return;
                }
                ws.settings.som = config;
                ws.settings.training_months = months;
                ws.som = Some(Arc::new(t.grid));
                ws.index = Some(Arc::new(t.index));
                ws.metrics = Some(t.metrics);
                ws.embedding = Some(Arc::new(t.embedding));
                ws.embedding_version += 1;
                self.next_anchor_generation();
                self.cache().clear();
                drop(ws);
                let msg = format!("explained variance {:.4}", t.metrics.explained_variance);
                self.update_job(id, JobState::Done, Some(1.0), Some(msg));
            }
            Ok(_) => self.update_job(id, JobState::Cancelled, None, Some("cancelled".into())),
            Err(e) => self.update_job(id, JobState::Failed, None, Some(e.to_string())),
        }
    }
}

async fn job(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<JobStatus>> {
    let id = parse_id(&id, "job")?;
    s.job(id).map(Json).ok_or_else(|| ServiceError::NotFound(format!("unknown job {id}")))
}

async fn cancel_job(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<JobStatus>> {
    let id = parse_id(&id, "job")?;
    Ok(Json(s.jobs().cancel(id)?))
}

// SOM nodes

#[derive(Serialize)]
struct GridGeometry<'a> {
    rows: usize,
    cols: usize,
    lats: &'a [f64],
    lons: &'a [f64],
    valid_mask: Vec<bool>,
}

#[derive(Serialize)]
struct NodesView<'a> {
    rows: usize,
    cols: usize,
    dim: usize,
    geometry: GridGeometry<'a>,
    nodes: Vec<&'a [f32]>,
    metrics: Option<SomMetrics>,
}

async fn nodes(State(s): State<AppState>) -> Result<Response> {
    let ws = s.read();
    let grid = ws.som.as_ref().ok_or_else(ServiceError::no_som)?;
    let g = &ws.dataset.grid;
    let view = NodesView {
        rows: grid.rows(),
        cols: grid.cols(),
        dim: grid.dim,
        geometry: GridGeometry {
            rows: g.rows,
            cols: g.cols,
            lats: &g.lats,
            lons: &g.lons,
            valid_mask: g.valid_mask(),
        },
        nodes: (0..grid.num_nodes()).map(|k| grid.node(k)).collect(),
        metrics: ws.metrics,
    };
    Ok(Json(view).into_response())
}

#[derive(Serialize)]
struct NodeView<'a> {
    node: usize,
    row: usize,
    col: usize,
    values: &'a [f32],
    spatial_mean: f64,
    position: Option<Point>,
}

async fn node(State(s): State<AppState>, Path(i): Path<String>) -> Result<Response> {
    let ws = s.read();
    let grid = ws.som.as_ref().ok_or_else(ServiceError::no_som)?;
    let k = parse_id(&i, "node")? as usize;
    if k >= grid.num_nodes() {
        return Err(ServiceError::NotFound(format!("unknown node {k}")));
    }
    let values = grid.node(k);
    let (row, col) = grid.grid_coords(k);
    let view = NodeView {
        node: k,
        row,
        col,
        values,
        spatial_mean: values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64,
        position: ws.embedding.as_ref().map(|e| e.positions[k]),
    };
    Ok(Json(view).into_response())
}

// Embedding anchors

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorEntry {
    pub node: usize,
    pub position: Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingView {
    pub version: u64,
    pub positions: Vec<Point>,
    pub anchors: Vec<AnchorEntry>,
    pub status: EmbedStatus,
    pub objective: f64,
    pub iterations: usize,
}

impl EmbeddingView {
    fn new(e: &Embedding, version: u64) -> Self {
        EmbeddingView {
            version,
            positions: e.positions.clone(),
            anchors: e
                .anchors
                .iter()
                .map(|(&node, &position)| AnchorEntry { node, position })
                .collect(),
            status: e.status,
            objective: e.objective,
            iterations: e.iterations,
        }
    }
}

async fn get_anchors(State(s): State<AppState>) -> Result<Json<EmbeddingView>> {
    let ws = s.read();
    let e = ws.embedding.as_ref().ok_or_else(ServiceError::no_som)?;
    Ok(Json(EmbeddingView::new(e, ws.embedding_version)))
}

#[derive(Deserialize)]
struct AnchorsRequest {
    anchors: Vec<AnchorEntry>,
}

/// Replaces the anchor set and re-optimizes warm-started. A newer update
/// cancels an in-flight one, which then answers 409.
async fn put_anchors(State(s): State<AppState>, body: Bytes) -> Result<Json<EmbeddingView>> {
    let req: AnchorsRequest = parse(&body)?;
    let generation = s.next_anchor_generation();
    let base = s.read().embedding.clone().ok_or_else(ServiceError::no_som)?;
    let mut next = (*base).clone();
    next.anchors.clear();
    for a in &req.anchors {
        next.set_anchor(a.node, Some(a.position))?;
    }
    let worker = s.clone();
    let done = s
        .blocking(move || {
            let superseded = || worker.anchor_generation() != generation;
            Ok(reoptimize(&next, Some(&superseded))?)
        })
        .await?;
    let mut ws = s.write();
    if s.anchor_generation() != generation {
        return Err(ServiceError::conflict("superseded", "superseded by a newer anchor update"));
    }
    if ws.embedding.as_ref().is_none_or(|e| e.num_nodes() != done.num_nodes()) {
        return Err(ServiceError::conflict("som_changed", "the SOM changed during re-embedding"));
    }
    ws.embedding = Some(Arc::new(done));
    ws.embedding_version += 1;
    s.cache().clear();
    let e = ws.embedding.as_ref().unwrap();
    Ok(Json(EmbeddingView::new(e, ws.embedding_version)))
}

// Annotations

#[derive(Deserialize)]
struct AnnotationBody {
    label: String,
    vertices: Vec<Point>,
}

fn find_annotation(ws: &Workspace, id: u64) -> Result<usize> {
    ws.annotations
        .iter()
        .position(|a| a.id == id)
        .ok_or_else(|| ServiceError::NotFound(format!("unknown annotation {id}")))
}

fn annotations_changed(s: &AppState, ws: &mut Workspace, annotations: Vec<Annotation>) {
    ws.annotations = Arc::new(annotations);
    ws.annotation_version += 1;
    s.cache().clear();
}

async fn list_annotations(State(s): State<AppState>) -> Json<Vec<Annotation>> {
    Json(s.read().annotations.to_vec())
}

async fn get_annotation(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<Annotation>> {
    let id = parse_id(&id, "annotation")?;
    let ws = s.read();
    Ok(Json(ws.annotations[find_annotation(&ws, id)?].clone()))
}

async fn create_annotation(State(s): State<AppState>, body: Bytes) -> Result<(StatusCode, Json<Annotation>)> {
    let req: AnnotationBody = parse(&body)?;
    let mut ws = s.write();
    let id = ws.next_annotation_id;
    let a = Annotation::new(id, req.label, req.vertices, id)?;
    let mut list = ws.annotations.to_vec();
    list.push(a.clone());
    ws.next_annotation_id += 1;
    annotations_changed(&s, &mut ws, list);
    Ok((StatusCode::CREATED, Json(a)))
}

async fn update_annotation(State(s): State<AppState>, Path(id): Path<String>, body: Bytes) -> Result<Json<Annotation>> {
    let id = parse_id(&id, "annotation")?;
    let req: AnnotationBody = parse(&body)?;
    let mut ws = s.write();
    let pos = find_annotation(&ws, id)?;
    let mut list = ws.annotations.to_vec();
    let a = Annotation::new(id, req.label, req.vertices, list[pos].created_order)?;
    list[pos] = a.clone();
    annotations_changed(&s, &mut ws, list);
    Ok(Json(a))
}

async fn delete_annotation(State(s): State<AppState>, Path(id): Path<String>) -> Result<StatusCode> {
    let id = parse_id(&id, "annotation")?;
    let mut ws = s.write();
    let pos = find_annotation(&ws, id)?;
    let mut list = ws.annotations.to_vec();
    list.remove(pos);
    annotations_changed(&s, &mut ws, list);
    Ok(StatusCode::NO_CONTENT)
}

// LLM

#[derive(Deserialize)]
struct ForwardRequest {
    question: String,
}

#[derive(Serialize)]
struct ForwardResponse {
    query: ForwardQuery,
    nodes: Vec<usize>,
    boundary: Option<Vec<Point>>,
}

async fn llm_forward(State(s): State<AppState>, body: Bytes) -> Result<Json<ForwardResponse>> {
    let req: ForwardRequest = parse(&body)?;
    let ws = s.workspace();
    let (Some(grid), Some(embedding)) = (ws.som.clone(), ws.embedding.clone()) else {
        return Err(ServiceError::no_som());
    };
    let llm = s.0.llm.clone();
    let out = s
        .blocking(move || {
            let query = parse_forward_query(&*llm, &ws.counties, &req.question)?;
            let r = apply_filter(&query.filter, &grid, &ws.dataset.grid, &embedding)?;
            Ok(ForwardResponse {
                query,
                nodes: r.nodes,
                boundary: r.boundary,
            })
        })
        .await?;
    Ok(Json(out))
}

fn default_cutoffs() -> [f64; 4] {
    DEFAULT_CUTOFFS
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}

#[derive(Deserialize)]
struct BackwardRequest {
    vertices: Vec<Point>,
    #[serde(default = "default_cutoffs")]
    cutoffs: [f64; 4],
    #[serde(default = "default_samples")]
    samples: usize,
}

#[derive(Serialize)]
struct BackwardResponse {
    buckets: Vec<NodeSummaryBuckets>,
    summary: RegionSummary,
}

async fn llm_backward(State(s): State<AppState>, body: Bytes) -> Result<Json<BackwardResponse>> {
    let req: BackwardRequest = parse(&body)?;
    let ws = s.workspace();
    let (Some(grid), Some(embedding)) = (ws.som.clone(), ws.embedding.clone()) else {
        return Err(ServiceError::no_som());
    };
    let llm = s.0.llm.clone();
    let out = s
        .blocking(move || {
            let buckets = bucket_nodes(
                &req.vertices,
                &grid,
                &ws.dataset.grid,
                &embedding,
                &ws.counties,
                req.cutoffs,
                req.samples,
            )?;
            let summary = summarize_region(&*llm, &buckets)?;
            Ok(BackwardResponse { buckets, summary })
        })
        .await?;
    Ok(Json(out))
}

// Analysis

async fn analyze(s: AppState, req: AnalysisRequest) -> Result<Response> {
    let snap = s.read().snapshot()?;
    let key = snap.digest(&req);
    if let Some(hit) = s.cache().get(&key) {
        return Ok(json_bytes(hit.clone()));
    }
    let (ev, av) = (snap.embedding_version, snap.annotation_version);
    let bytes = Bytes::from(s.blocking(move || snap.run(&req)).await?);
    {
        let ws = s.read();
        if ws.embedding_version == ev && ws.annotation_version == av {
            s.cache().insert(key, bytes.clone());
        }
    }
    Ok(json_bytes(bytes))
}

async fn analysis_distribution(State(s): State<AppState>, body: Bytes) -> Result<Response> {
    let req: DistributionRequest = parse(&body)?;
    analyze(s, AnalysisRequest::Distribution(req)).await
}

async fn analysis_side_by_side(State(s): State<AppState>, body: Bytes) -> Result<Response> {
    let req: SideBySideRequest = parse(&body)?;
    analyze(s, AnalysisRequest::SideBySide(req)).await
}

async fn analysis_vector_field(State(s): State<AppState>, body: Bytes) -> Result<Response> {
    let req: PairRequest = parse(&body)?;
    analyze(s, AnalysisRequest::VectorField(req)).await
}

async fn analysis_transitions(State(s): State<AppState>, body: Bytes) -> Result<Response> {
    let req: PairRequest = parse(&body)?;
    analyze(s, AnalysisRequest::Transitions(req)).await
}

type QueryMap = BTreeMap<String, String>;

fn q_list(q: &QueryMap, key: &str) -> Vec<String> {
    q.get(key)
        .map(|v| v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect())
        .unwrap_or_default()
}

fn q_parse<T: FromStr>(q: &QueryMap, key: &str) -> Result<Option<T>> {
    q.get(key)
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| ServiceError::Invalid(format!("invalid query parameter {key}={v}")))
        })
        .transpose()
}

fn q_cluster(q: &QueryMap) -> Result<ClusterParams> {
    let d = ClusterParams::default();
    Ok(ClusterParams {
        min_cluster_size: q_parse(q, "min_cluster_size")?.unwrap_or(d.min_cluster_size),
        min_samples: q_parse(q, "min_samples")?.unwrap_or(d.min_samples),
    })
}

fn q_months(q: &QueryMap) -> String {
    q.get("months").cloned().unwrap_or_else(|| "all".into())
}

/// Query parameters of `GET /analysis/timeline/runs`: `members` (comma
/// list), `months`, `min_cluster_size`, `min_samples`, `include_aggregates`.
pub fn runs_request(q: &QueryMap) -> Result<RunTimelineRequest> {
    Ok(RunTimelineRequest {
        members: q_list(q, "members"),
        months: q_months(q),
        cluster: q_cluster(q)?,
        include_aggregates: q_parse(q, "include_aggregates")?.unwrap_or(false),
    })
}

/// Query parameters of `GET /analysis/timeline/forcings`: `ssp` (required),
/// `gcms`, `months`, `k`, `n`, `seed`, `ground`, plus the clustering ones.
pub fn forcings_request(q: &QueryMap) -> Result<ForcingTimelineRequest> {
    let ssp = q
        .get("ssp")
        .cloned()
        .ok_or_else(|| ServiceError::Invalid("missing query parameter ssp".into()))?;
    let d = BootstrapParams::default();
    let ground = match q.get("ground").map(String::as_str) {
        None => d.ground,
        Some("euclidean") => GroundCost::Euclidean,
        Some("squared_euclidean") => GroundCost::SquaredEuclidean,
        Some(other) => return Err(ServiceError::Invalid(format!("unknown ground cost {other}"))),
    };
    Ok(ForcingTimelineRequest {
        gcms: q_list(q, "gcms"),
        ssp,
        months: q_months(q),
        bootstrap: BootstrapParams {
            k: q_parse(q, "k")?.unwrap_or(d.k),
            n: q_parse(q, "n")?.unwrap_or(d.n),
            seed: q_parse(q, "seed")?.unwrap_or(d.seed),
            ground,
        },
        cluster: q_cluster(q)?,
        include_aggregates: q_parse(q, "include_aggregates")?.unwrap_or(false),
    })
}

async fn timeline_runs(State(s): State<AppState>, Query(q): Query<QueryMap>) -> Result<Response> {
    let req = runs_request(&q)?;
    analyze(s, AnalysisRequest::RunTimeline(req)).await
}

async fn timeline_forcings(State(s): State<AppState>, Query(q): Query<QueryMap>) -> Result<Response> {
    let req = forcings_request(&q)?;
    analyze(s, AnalysisRequest::ForcingTimeline(req)).await
}

// Project

#[derive(Serialize)]
struct ProjectView {
    path: Option<PathBuf>,
    settings: ProjectSettings,
    members: Vec<String>,
    has_som: bool,
    metrics: Option<SomMetrics>,
    annotations: usize,
    embedding_version: u64,
    annotation_version: u64,
    training_active: bool,
}

fn project_view(s: &AppState) -> ProjectView {
    let training_active = s.jobs().is_active();
    let ws = s.read();
    ProjectView {
        path: ws.path.clone(),
        settings: ws.settings.clone(),
        members: ws.dataset.members.iter().map(|m| m.key()).collect(),
        has_som: ws.som.is_some(),
        metrics: ws.metrics,
        annotations: ws.annotations.len(),
        embedding_version: ws.embedding_version,
        annotation_version: ws.annotation_version,
        training_active,
    }
}

async fn get_project(State(s): State<AppState>) -> Json<ProjectView> {
    Json(project_view(&s))
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum ProjectOp {
    Save,
    Load,
}

#[derive(Deserialize)]
struct ProjectRequest {
    op: ProjectOp,
    /// Defaults to the current project path.
    #[serde(default)]
    path: Option<PathBuf>,
}

async fn put_project(State(s): State<AppState>, body: Bytes) -> Result<Json<ProjectView>> {
    let req: ProjectRequest = parse(&body)?;
    let path = req
        .path
        .or_else(|| s.read().path.clone())
        .ok_or_else(|| ServiceError::Invalid("no project path".into()))?;
    match req.op {
        ProjectOp::Save => {
            let ws = s.workspace();
            let target = path.clone();
            s.blocking(move || ws.save(&target)).await?;
            s.write().path = Some(path);
        }
        ProjectOp::Load => {
            if s.jobs().is_active() {
                return Err(ServiceError::conflict("training_active", "cannot load while training"));
            }
            let mut loaded = s.blocking(move || Workspace::open(&path)).await?;
            let mut ws = s.write();
            loaded.embedding_version = ws.embedding_version + 1;
            loaded.annotation_version = ws.annotation_version + 1;
            *ws = loaded;
            s.next_anchor_generation();
            s.cache().clear();
        }
    }
    Ok(Json(project_view(&s)))
}
