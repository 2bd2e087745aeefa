use std::sync::Arc;
use std::time::Duration;

use axum::body::{Body, Bytes};
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use somatlas::annotate::{LlmClient, LlmError, LlmRequest, StubLlm};
use somatlas::data::{flatten_samples, generate_synthetic_ensemble, random_archetypes, save_ensemble, EnsembleDataset, MemberId, MonthFilter, SyntheticSpec};
use somatlas::distribution::project_runs;
use somatlas::embed::{embed_grid, MdeConfig};
use somatlas::project::{Project, ProjectSettings};
use somatlas::som::{train_som, SomConfig};
use somatlas_service::{router, AppState, EmbeddingView, ErrorEnvelope, JobState, JobStatus, Workspace};

fn raw_dataset() -> EnsembleDataset {
    let archetypes = random_archetypes(2, 16, 1);
    let spec = SyntheticSpec::new(4, 4, 12, archetypes.clone())
        .months(vec![1, 7])
        .member("a", "historical", vec![1.0, 0.0])
        .member("a", "ssp585", vec![0.0, 1.0])
        .member("b", "historical", vec![0.5, 0.5]);
    let raw = generate_synthetic_ensemble(&spec, 3).unwrap();
    let steps = raw.num_steps();
    let mut members = raw.members.clone();
    let mut values: Vec<Vec<f64>> = (0..members.len())
        .map(|m| (0..steps).flat_map(|t| raw.step(m, t).to_vec()).collect())
        .collect();
    // Same field at every step, so every step shares one BMU.
    members.push(MemberId::new("steady", "historical", "r1i1p1f1"));
    values.push((0..steps).flat_map(|_| archetypes[0].clone()).collect());
    EnsembleDataset::new(members, raw.grid.clone(), raw.time.clone(), values).unwrap()
}

fn dataset() -> EnsembleDataset {
    raw_dataset().normalize_per_month().unwrap()
}

fn workspace() -> Workspace {
    workspace_with(ProjectSettings::default())
}

fn workspace_with(settings: ProjectSettings) -> Workspace {
    let ds = dataset();
    let config = SomConfig {
        rows: 4,
        cols: 4,
        iterations: Some(3000),
        seed: 1,
        ..Default::default()
    };
    let grid = train_som(&flatten_samples(&ds, &MonthFilter::all()).unwrap(), &config, None).unwrap();
    let mut project = Project::new(ProjectSettings { som: config, ..settings });
    project.embedding = Some(embed_grid(&grid, &MdeConfig::default()).unwrap());
    project.som = Some(grid);
    Workspace::new(project, ds, None, None).unwrap()
}

fn app_with(llm: Arc<dyn LlmClient>) -> (AppState, Router) {
    let state = AppState::new(workspace(), llm);
    (state.clone(), router(state))
}

fn app() -> (AppState, Router) {
    app_with(Arc::new(StubLlm::new()))
}

async fn send(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Bytes) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes())
}

fn value(bytes: &Bytes) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn envelope(bytes: &Bytes) -> ErrorEnvelope {
    serde_json::from_slice(bytes).unwrap()
}

async fn wait_terminal(app: &Router, id: u64) -> JobStatus {
    for _ in 0..600 {
        let (status, body) = send(app, Method::GET, &format!("/jobs/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let job: JobStatus = serde_json::from_slice(&body).unwrap();
        if matches!(job.state, JobState::Done | JobState::Failed | JobState::Cancelled) {
            return job;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    panic!("job {id} did not finish");
}

#[tokio::test]
async fn all_anchored_embedding_equals_anchors() {
    let (_, app) = app();
    let anchors: Vec<Value> = (0..16)
        .map(|k| json!({"node": k, "position": [(k % 4) as f64 * 0.5, (k / 4) as f64 * -0.25]}))
        .collect();
    let (status, _) = send(&app, Method::PUT, "/embedding/anchors", Some(json!({ "anchors": anchors }))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, body) = send(&app, Method::GET, "/embedding/anchors", None).await;
    assert_eq!(status, StatusCode::OK);
    let view: EmbeddingView = serde_json::from_slice(&body).unwrap();
    assert_eq!(view.anchors.len(), 16);
    for a in &view.anchors {
        assert_eq!(view.positions[a.node], a.position);
    }
    assert_eq!(view.version, 1);
}

#[tokio::test]
async fn anchor_out_of_range_is_404() {
    let (_, app) = app();
    let body = json!({"anchors": [{"node": 99, "position": [0.0, 0.0]}]});
    let (status, bytes) = send(&app, Method::PUT, "/embedding/anchors", Some(body)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(envelope(&bytes).code, "not_found");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn second_training_is_409_and_cancel_keeps_previous_som() {
    let (state, app) = app();
    let before = state.workspace().som.unwrap();
    let body = json!({"som": {"rows": 4, "cols": 4, "kR": 0.03, "kS": 0.2, "iterations": 200_000_000u64}});
    let (a, b) = tokio::join!(
        send(&app, Method::POST, "/som/train", Some(body.clone())),
        send(&app, Method::POST, "/som/train", Some(body.clone()))
    );
    let mut statuses = [a.0, b.0];
    statuses.sort();
    assert_eq!(statuses, [StatusCode::ACCEPTED, StatusCode::CONFLICT]);
    let accepted = if a.0 == StatusCode::ACCEPTED { &a.1 } else { &b.1 };
    let rejected = if a.0 == StatusCode::ACCEPTED { &b.1 } else { &a.1 };
    assert_eq!(envelope(rejected).code, "training_active");
    let id = value(accepted)["job_id"].as_u64().unwrap();

    let (status, _) = send(&app, Method::POST, &format!("/jobs/{id}/cancel"), None).await;
    assert_eq!(status, StatusCode::OK);
    let job = wait_terminal(&app, id).await;
    assert_eq!(job.state, JobState::Cancelled);
    assert_eq!(*state.workspace().som.unwrap(), *before);

    // A new job may start once the old one is gone.
    let (status, body) = send(&app, Method::POST, "/som/train", Some(json!({"som": {"rows": 3, "cols": 3, "kR": 0.1, "kS": 0.2, "iterations": 500}}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job = wait_terminal(&app, value(&body)["job_id"].as_u64().unwrap()).await;
    assert_eq!(job.state, JobState::Done, "{}", job.message);
    assert_eq!(job.progress, 1.0);
    let ws = state.workspace();
    assert_eq!(ws.som.unwrap().num_nodes(), 9);
    assert_eq!(ws.embedding.unwrap().num_nodes(), 9);
    assert_eq!(ws.embedding_version, 1);
}

#[tokio::test]
async fn invalid_training_config_is_422() {
    let (_, app) = app();
    let body = json!({"som": {"rows": 4, "cols": 4, "kR": 0.03, "kS": 1.5}});
    let (status, bytes) = send(&app, Method::POST, "/som/train", Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(envelope(&bytes).code, "invalid");
}

#[tokio::test]
async fn single_node_member_distribution_matches_oracle() {
    let (state, app) = app();
    let body = json!({"members": ["steady/historical/r1i1p1f1"], "months": "1"});
    let (status, bytes) = send(&app, Method::POST, "/analysis/distribution", Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    let v = value(&bytes);
    let points: Vec<[f64; 2]> = serde_json::from_value(v["points"].clone()).unwrap();
    assert_eq!(points.len(), 12);
    assert!(points.iter().all(|p| *p == points[0]));
    assert!(v["kde"].is_null());

    let ws = state.workspace();
    let m = ws.dataset.member_index("steady/historical/r1i1p1f1").unwrap();
    let oracle = project_runs(
        &ws.dataset,
        &[m],
        &MonthFilter::single(1).unwrap(),
        ws.som.as_ref().unwrap(),
        ws.embedding.as_ref().unwrap(),
    )
    .unwrap();
    assert_eq!(points, oracle.points);
}

#[tokio::test]
async fn repeated_requests_are_identical_and_annotations_invalidate() {
    let (_, app) = app();
    let body = json!({"members": ["a/historical/r1i1p1f1", "b/historical/r1i1p1f1"], "months": "all"});
    let (s1, first) = send(&app, Method::POST, "/analysis/distribution", Some(body.clone())).await;
    let (s2, second) = send(&app, Method::POST, "/analysis/distribution", Some(body.clone())).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(first, second);
    assert!(value(&first)["breakdown"]["annotations"].as_array().unwrap().is_empty());

    let big = json!({"label": "all", "vertices": [[-100.0, -100.0], [100.0, -100.0], [100.0, 100.0], [-100.0, 100.0]]});
    let (status, created) = send(&app, Method::POST, "/annotations", Some(big)).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(value(&created)["id"], 0);
    let (_, third) = send(&app, Method::POST, "/analysis/distribution", Some(body)).await;
    let shares = value(&third)["breakdown"]["annotations"].clone();
    assert_eq!(shares[0]["label"], "all");
    assert_eq!(shares[0]["fraction"], 1.0);
}

#[tokio::test]
async fn annotation_crud() {
    let (_, app) = app();
    let tri = json!({"label": "wet", "vertices": [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]});
    let (status, _) = send(&app, Method::POST, "/annotations", Some(tri)).await;
    assert_eq!(status, StatusCode::CREATED);
    let edit = json!({"label": "wetter", "vertices": [[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]});
    let (status, bytes) = send(&app, Method::PUT, "/annotations/0", Some(edit)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(value(&bytes)["label"], "wetter");
    let (_, bytes) = send(&app, Method::GET, "/annotations/0", None).await;
    assert_eq!(value(&bytes)["vertices"][1], json!([2.0, 0.0]));

    let bowtie = json!({"label": "x", "vertices": [[0.0, 0.0], [1.0, 1.0], [1.0, 0.0], [0.0, 1.0]]});
    let (status, _) = send(&app, Method::POST, "/annotations", Some(bowtie)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, _) = send(&app, Method::DELETE, "/annotations/0", None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = send(&app, Method::GET, "/annotations/0", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (_, bytes) = send(&app, Method::GET, "/annotations", None).await;
    assert_eq!(value(&bytes), json!([]));
}

#[tokio::test]
async fn error_envelopes() {
    let (_, app) = app();
    let (status, bytes) = send(&app, Method::POST, "/analysis/distribution", Some(json!({"members": ["nope/x/y"]}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(envelope(&bytes).message.contains("nope/x/y"));

    let (status, bytes) = send(&app, Method::POST, "/analysis/vector-field", Some(json!({"from": 1}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(envelope(&bytes).code, "invalid");

    let (status, _) = send(&app, Method::GET, "/jobs/7", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = send(&app, Method::GET, "/som/node/16", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, bytes) = send(&app, Method::GET, "/nowhere", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(envelope(&bytes).code, "not_found");
    let (status, _) = send(&app, Method::GET, "/analysis/timeline/forcings", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn nodes_and_single_node() {
    let (state, app) = app();
    let (status, bytes) = send(&app, Method::GET, "/som/nodes", None).await;
    assert_eq!(status, StatusCode::OK);
    let v = value(&bytes);
    assert_eq!(v["nodes"].as_array().unwrap().len(), 16);
    assert_eq!(v["geometry"]["valid_mask"].as_array().unwrap().len(), 16);
    assert!(v["metrics"]["explained_variance"].as_f64().unwrap() > 0.0);

    let (status, bytes) = send(&app, Method::GET, "/som/node/5", None).await;
    assert_eq!(status, StatusCode::OK);
    let v = value(&bytes);
    let values: Vec<f32> = serde_json::from_value(v["values"].clone()).unwrap();
    assert_eq!(values, state.workspace().som.unwrap().node(5));
    assert_eq!((v["row"].as_u64(), v["col"].as_u64()), (Some(1), Some(1)));
}

#[tokio::test]
async fn timelines_over_query_parameters() {
    let (_, app) = app();
    let (status, bytes) = send(&app, Method::GET, "/analysis/timeline/runs?months=1,7&min_cluster_size=2", None).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    let v = value(&bytes);
    assert_eq!(v["months"].as_array().unwrap().len(), 2);
    assert_eq!(v["lines"].as_array().unwrap().len(), 4);

    let (status, bytes) = send(&app, Method::GET, "/analysis/timeline/forcings?ssp=ssp585&months=1&k=4&n=4", None).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    let v = value(&bytes);
    assert_eq!(v["lines"][0]["entity"], "a");
}

#[tokio::test]
async fn forward_query_with_stub() {
    let (_, app) = app();
    let q = json!({"question": "Show me nodes with average precipitation over Southern California above 0"});
    let (status, bytes) = send(&app, Method::POST, "/llm/forward", Some(q)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    let v = value(&bytes);
    assert_eq!(v["query"]["spec"]["kind"], "threshold_above");
    let regions = &v["query"]["regions"][0]["counties"];
    assert!(regions.as_array().unwrap().contains(&json!("Los Angeles-CA")));

    let region = json!({"vertices": [[-100.0, -100.0], [100.0, -100.0], [100.0, 100.0], [-100.0, 100.0]], "samples": 3});
    let (status, bytes) = send(&app, Method::POST, "/llm/backward", Some(region)).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    let v = value(&bytes);
    assert_eq!(v["buckets"].as_array().unwrap().len(), 3);
    assert!(!v["summary"]["summary"].as_str().unwrap().is_empty());
}

struct Down;

impl LlmClient for Down {
    fn complete(&self, _: &LlmRequest) -> Result<String, LlmError> {
        Err(LlmError::Unreachable("connection refused".into()))
    }
}

#[tokio::test]
async fn unreachable_llm_is_503() {
    let (_, app) = app_with(Arc::new(Down));
    let q = json!({"question": "nodes over Southern California above 0"});
    let (status, bytes) = send(&app, Method::POST, "/llm/forward", Some(q)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(envelope(&bytes).code, "llm_unavailable");
}

#[tokio::test]
async fn project_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    save_ensemble(&raw_dataset(), dir.path().join("ensemble")).unwrap();
    let state = AppState::new(
        workspace_with(ProjectSettings {
            dataset: Some("ensemble".into()),
            ..Default::default()
        }),
        Arc::new(StubLlm::new()),
    );
    let app = router(state.clone());
    let tri = json!({"label": "wet", "vertices": [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]});
    send(&app, Method::POST, "/annotations", Some(tri)).await;

    let path = dir.path().join("p.json");
    let (status, bytes) = send(&app, Method::PUT, "/project", Some(json!({"op": "save", "path": path}))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    let saved = std::fs::read(&path).unwrap();

    send(&app, Method::DELETE, "/annotations/0", None).await;
    let (status, bytes) = send(&app, Method::PUT, "/project", Some(json!({"op": "load"}))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    let v = value(&bytes);
    assert_eq!(v["annotations"], 1);
    assert_eq!(v["has_som"], true);
    assert_eq!(v["members"].as_array().unwrap().len(), 4);
    assert_eq!(state.workspace().som.unwrap().num_nodes(), 16);

    let (status, _) = send(&app, Method::PUT, "/project", Some(json!({"op": "save"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(std::fs::read(&path).unwrap(), saved);

    let (status, bytes) = send(&app, Method::PUT, "/project", Some(json!({"op": "load", "path": dir.path().join("missing.json")}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(envelope(&bytes).code, "invalid");
}
