//! Analysis requests and responses shared by the HTTP service and the CLI.
//! Both sides encode responses through [`encode`], so identical requests
//! against identical state yield identical bytes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotate::Annotation;
use crate::cluster::{forcing_timeline, monthly_timeline, ClusterError, ClusterParams, MonthlyClusterTimeline};
use crate::compare::{bootstrap_vector_field, side_by_side, transition_matrix, BootstrapParams, CompareError, TransitionMatrix, VectorField};
use crate::data::{parse_month_list, DataError, EnsembleDataset, MonthFilter};
use crate::distribution::{annotation_breakdown, kde, project_runs_indexed, AnnotationBreakdown, BmuIndex, DistError, KdeParams, KdeResult, RunDistribution, Selector};
use crate::embed::Embedding;
use crate::geometry::{BBox, Point};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("unknown member {0}")]
    UnknownMember(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(DataError),
    #[error(transparent)]
    Dist(DistError),
    #[error(transparent)]
    Compare(#[from] CompareError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

impl From<DataError> for AnalysisError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::UnknownMember(m) => AnalysisError::UnknownMember(m),
            e => AnalysisError::Data(e),
        }
    }
}

impl From<DistError> for AnalysisError {
    fn from(e: DistError) -> Self {
        match e {
            DistError::Data(d) => d.into(),
            e => AnalysisError::Dist(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

fn all_months() -> String {
    "all".into()
}

/// Members by key (`gcm/ssp/variant`) plus a month expression such as
/// `10-5`, `1,2,12` or `all`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub members: Vec<String>,
    #[serde(default = "all_months")]
    pub months: String,
}

impl Selection {
    pub fn new(members: Vec<String>, months: &str) -> Self {
        Selection {
            members,
            months: months.into(),
        }
    }

    fn resolve(&self, dataset: &EnsembleDataset) -> Result<(Vec<usize>, MonthFilter)> {
        if self.members.is_empty() {
            return Err(AnalysisError::Invalid("no members selected".into()));
        }
        let members = self
            .members
            .iter()
            .map(|k| dataset.member_index(k))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok((members, self.months.parse()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRequest {
    #[serde(flatten)]
    pub selection: Selection,
    #[serde(default)]
    pub kde: KdeParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionResponse {
    pub selector: Selector,
    pub points: Vec<Point>,
    pub nodes: Vec<usize>,
    /// `None` when every point coincides and no density exists.
    pub kde: Option<KdeResult>,
    pub breakdown: AnnotationBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRequest {
    pub from: Selection,
    pub to: Selection,
    #[serde(default)]
    pub bootstrap: BootstrapParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideBySideRequest {
    pub from: Selection,
    pub to: Selection,
    #[serde(default)]
    pub kde: KdeParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideBySideResponse {
    pub bbox: BBox,
    pub from: KdeResult,
    pub to: KdeResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTimelineRequest {
    /// Empty selects every member.
    #[serde(default)]
    pub members: Vec<String>,
    #[serde(default = "all_months")]
    pub months: String,
    #[serde(default)]
    pub cluster: ClusterParams,
    #[serde(default)]
    pub include_aggregates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcingTimelineRequest {
    /// Empty selects every GCM with both historical and `ssp` runs.
    #[serde(default)]
    pub gcms: Vec<String>,
    pub ssp: String,
    #[serde(default = "all_months")]
    pub months: String,
    #[serde(default)]
    pub bootstrap: BootstrapParams,
    #[serde(default)]
    pub cluster: ClusterParams,
    #[serde(default)]
    pub include_aggregates: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnalysisRequest {
    Distribution(DistributionRequest),
    SideBySide(SideBySideRequest),
    VectorField(PairRequest),
    Transitions(PairRequest),
    RunTimeline(RunTimelineRequest),
    ForcingTimeline(ForcingTimelineRequest),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AnalysisResponse {
    Distribution(DistributionResponse),
    SideBySide(SideBySideResponse),
    VectorField(VectorField),
    Transitions(TransitionMatrix),
    Timeline(MonthlyClusterTimeline),
}

/// Everything an analysis reads.
#[derive(Clone, Copy)]
pub struct AnalysisContext<'a> {
    pub dataset: &'a EnsembleDataset,
    pub index: &'a BmuIndex,
    pub embedding: &'a Embedding,
    pub annotations: &'a [Annotation],
}

impl AnalysisContext<'_> {
    fn project(&self, s: &Selection) -> Result<RunDistribution> {
        let (members, months) = s.resolve(self.dataset)?;
        Ok(project_runs_indexed(self.dataset, self.index, &members, &months, self.embedding)?)
    }
}

pub fn distribution(ctx: &AnalysisContext<'_>, req: &DistributionRequest) -> Result<DistributionResponse> {
    let d = ctx.project(&req.selection)?;
    let density = match kde(&d.points, &req.kde, None) {
        Err(DistError::Degenerate) => None,
        r => Some(r?),
    };
    Ok(DistributionResponse {
        breakdown: annotation_breakdown(&d.points, ctx.annotations),
        selector: d.selector,
        points: d.points,
        nodes: d.nodes,
        kde: density,
    })
}

pub fn run(ctx: &AnalysisContext<'_>, req: &AnalysisRequest) -> Result<AnalysisResponse> {
    Ok(match req {
        AnalysisRequest::Distribution(r) => AnalysisResponse::Distribution(distribution(ctx, r)?),
        AnalysisRequest::SideBySide(r) => {
            let (a, b) = (ctx.project(&r.from)?, ctx.project(&r.to)?);
            let (from, to) = side_by_side(&a.points, &b.points, &r.kde)?;
            AnalysisResponse::SideBySide(SideBySideResponse { bbox: from.bbox, from, to })
        }
        AnalysisRequest::VectorField(r) => {
            let (a, b) = (ctx.project(&r.from)?, ctx.project(&r.to)?);
            AnalysisResponse::VectorField(bootstrap_vector_field(&a.points, &b.points, &r.bootstrap, None)?)
        }
        AnalysisRequest::Transitions(r) => {
            let (a, b) = (ctx.project(&r.from)?, ctx.project(&r.to)?);
            AnalysisResponse::Transitions(transition_matrix(&a.points, &b.points, ctx.annotations, &r.bootstrap)?)
        }
        AnalysisRequest::RunTimeline(r) => {
            let members: Vec<usize> = if r.members.is_empty() {
                (0..ctx.dataset.members.len()).collect()
            } else {
                r.members.iter().map(|k| ctx.dataset.member_index(k)).collect::<std::result::Result<_, _>>()?
            };
            let months = parse_month_list(&r.months)?;
            let mut t = monthly_timeline(ctx.dataset, ctx.index, &members, &months, ctx.embedding, &r.cluster)?;
            if !r.include_aggregates {
                t.strip_aggregates();
            }
            AnalysisResponse::Timeline(t)
        }
        AnalysisRequest::ForcingTimeline(r) => {
            let gcms = if r.gcms.is_empty() { forcing_gcms(ctx.dataset, &r.ssp) } else { r.gcms.clone() };
            if gcms.is_empty() {
                return Err(AnalysisError::Invalid(format!("no GCM has both historical and {} runs", r.ssp)));
            }
            let months = parse_month_list(&r.months)?;
            let mut t = forcing_timeline(
                ctx.dataset,
                ctx.index,
                &gcms,
                &r.ssp,
                &months,
                ctx.embedding,
                &r.bootstrap,
                &r.cluster,
            )?;
            if !r.include_aggregates {
                t.strip_aggregates();
            }
            AnalysisResponse::Timeline(t)
        }
    })
}

/// GCMs with both historical and `ssp` members, sorted.
pub fn forcing_gcms(dataset: &EnsembleDataset, ssp: &str) -> Vec<String> {
    let has = |gcm: &str, hist: bool| {
        dataset
            .members
            .iter()
            .any(|m| m.gcm == gcm && if hist { m.is_historical() } else { m.ssp == ssp })
    };
    let mut gcms: Vec<String> = dataset.members.iter().map(|m| m.gcm.clone()).collect();
    gcms.sort();
    gcms.dedup();
    gcms.retain(|g| has(g, true) && has(g, false));
    gcms
}

/// The one serializer for response bodies and CLI dumps.
pub fn encode<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("analysis payloads serialize")
}

/// Content digest of a request against given embedding and annotation
/// versions, used as the analysis cache key.
pub fn request_digest(req: &AnalysisRequest, embedding_version: u64, annotation_version: u64) -> String {
    let mut h = Sha256::new();
    h.update(encode(req));
    h.update(embedding_version.to_le_bytes());
    h.update(annotation_version.to_le_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
