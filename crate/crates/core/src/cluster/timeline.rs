use serde::{Deserialize, Serialize};

use super::{
    embed_cluster, emd, emd_matrix_any, field_distance, mds_1d, symmetric, ClusterAssignment, ClusterError,
    ClusterParams, DistanceMatrix, Result,
};
use crate::compare::{bootstrap_vector_field, BootstrapParams, CompareError, VectorField};
use crate::data::{EnsembleDataset, MonthFilter};
use crate::distribution::{project_runs_indexed, BmuIndex, DistError, RunDistribution};
use crate::embed::Embedding;
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ClusterAggregate {
    Runs(RunDistribution),
    Field(VectorField),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineCluster {
    /// Real clusters keep their assignment id; noise entities follow as
    /// singleton pseudo-clusters.
    pub id: usize,
    pub noise: bool,
    pub position: f64,
    pub mean_anomaly: f64,
    pub members: Vec<String>,
    /// `month/id`, a stable handle for the cluster.
    pub aggregate_ref: String,
    /// Pooled distribution or mean field; dropped from payloads unless asked for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<ClusterAggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthClusters {
    pub month: u8,
    pub assignment: ClusterAssignment,
    pub clusters: Vec<TimelineCluster>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineStep {
    pub month: u8,
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityLine {
    pub entity: String,
    pub steps: Vec<LineStep>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthlyClusterTimeline {
    pub months: Vec<MonthClusters>,
    pub lines: Vec<EntityLine>,
}

impl MonthlyClusterTimeline {
    pub fn month(&self, month: u8) -> Option<&MonthClusters> {
        self.months.iter().find(|m| m.month == month)
    }

    pub fn strip_aggregates(&mut self) {
        for c in self.months.iter_mut().flat_map(|m| m.clusters.iter_mut()) {
            c.aggregate = None;
        }
    }
}

/// Clusters in id order, then one singleton per noise entity.
fn groups_of(a: &ClusterAssignment) -> Vec<(Vec<usize>, bool)> {
    let mut out: Vec<(Vec<usize>, bool)> = (0..a.num_clusters).map(|c| (a.members(c), false)).collect();
    out.extend(a.noise().into_iter().map(|i| (vec![i], true)));
    out
}

/// 1-D MDS positions, oriented so the lowest-anomaly group sits on the low
/// side (the highest-anomaly group breaks an exact tie).
fn place(d: &[Vec<f64>], anomaly: &[f64]) -> Vec<f64> {
    let mut x = mds_1d(d);
    if x.len() < 2 {
        return x;
    }
    let arg = |better: fn(f64, f64) -> bool| {
        (1..anomaly.len()).fold(0, |k, i| if better(anomaly[i], anomaly[k]) { i } else { k })
    };
    let (lo, hi) = (arg(|a, b| a < b), arg(|a, b| a > b));
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mid = 0.5 * (min + max);
    let flip = x[lo] > mid || (x[lo] == mid && x[hi] < mid);
    if flip {
        x.iter_mut().for_each(|v| *v = -*v);
    }
    x
}

fn month_filter(month: u8) -> Result<MonthFilter> {
    MonthFilter::single(month).map_err(|e| ClusterError::Dist(DistError::from(e)))
}

fn check_request(entities: usize, months: &[u8]) -> Result<()> {
    if entities == 0 {
        return Err(ClusterError::TooFewEntities { found: 0, min: 1 });
    }
    if months.is_empty() {
        return Err(ClusterError::InvalidParams("no months requested".into()));
    }
    Ok(())
}

fn lines(entities: &[String], months: &[MonthClusters]) -> Vec<EntityLine> {
    entities
        .iter()
        .enumerate()
        .map(|(i, e)| EntityLine {
            entity: e.clone(),
            steps: months
                .iter()
                .map(|m| LineStep {
                    month: m.month,
                    cluster: m.clusters.iter().find(|c| c.members.contains(&entities[i])).map(|c| c.id).unwrap(),
                })
                .collect(),
        })
        .collect()
}

/// Per month: one distribution per member, EMD matrix, embed + cluster,
/// then 1-D placement of the clusters by EMD between pooled distributions.
pub fn monthly_timeline(
    dataset: &EnsembleDataset,
    index: &BmuIndex,
    members: &[usize],
    months: &[u8],
    embedding: &Embedding,
    params: &ClusterParams,
) -> Result<MonthlyClusterTimeline> {
    check_request(members.len(), months)?;
    let keys: Vec<String> = members.iter().map(|&m| dataset.members[m].key()).collect();
    let per_month = par::map_slice(months, |&month| -> Result<MonthClusters> {
        let filter = month_filter(month)?;
        let dists = members
            .iter()
            .map(|&m| project_runs_indexed(dataset, index, &[m], &filter, embedding))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let assignment = embed_cluster(&emd_matrix_any(keys.clone(), &dists)?, params)?;
        let groups = groups_of(&assignment);
        let pooled: Vec<RunDistribution> = groups
            .iter()
            .map(|(g, _)| RunDistribution::pooled(g.iter().map(|&i| &dists[i])))
            .collect();
        let anomaly: Vec<f64> = pooled
            .iter()
            .map(|p| {
                let s: f64 = p.provenance.iter().map(|o| dataset.spatial_mean(o.member, o.step)).sum();
                s / p.provenance.len() as f64
            })
            .collect();
        let inter = symmetric(groups.len(), |i, j| emd(&pooled[i].points, &pooled[j].points))?;
        let pos = place(&inter, &anomaly);
        let clusters = groups
            .into_iter()
            .zip(pooled)
            .enumerate()
            .map(|(id, ((g, noise), agg))| TimelineCluster {
                id,
                noise,
                position: pos[id],
                mean_anomaly: anomaly[id],
                members: g.iter().map(|&i| keys[i].clone()).collect(),
                aggregate_ref: format!("{month}/{id}"),
                aggregate: Some(ClusterAggregate::Runs(agg)),
            })
            .collect();
        Ok(MonthClusters {
            month,
            assignment,
            clusters,
        })
    });
    let months = per_month.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MonthlyClusterTimeline {
        lines: lines(&keys, &months),
        months,
    })
}

fn members_of(dataset: &EnsembleDataset, gcm: &str, ssp: &str) -> Result<Vec<usize>> {
    let historical = ssp.eq_ignore_ascii_case("historical");
    let found: Vec<usize> = (0..dataset.members.len())
        .filter(|&i| {
            let m = &dataset.members[i];
            m.gcm == gcm && if historical { m.is_historical() } else { m.ssp == ssp }
        })
        .collect();
    if found.is_empty() {
        return Err(ClusterError::MissingMember {
            gcm: gcm.into(),
            ssp: ssp.into(),
        });
    }
    Ok(found)
}

/// Transport field from a GCM's historical runs to its runs under `ssp`,
/// pooled over variants, on the embedding's bounding box so that every
/// forcing field shares one grid.
pub fn forcing_field(
    dataset: &EnsembleDataset,
    index: &BmuIndex,
    gcm: &str,
    ssp: &str,
    months: &MonthFilter,
    embedding: &Embedding,
    params: &BootstrapParams,
) -> Result<VectorField> {
    let hist = members_of(dataset, gcm, "historical")?;
    let future = members_of(dataset, gcm, ssp)?;
    let r1 = project_runs_indexed(dataset, index, &hist, months, embedding)?;
    let r2 = project_runs_indexed(dataset, index, &future, months, embedding)?;
    Ok(bootstrap_vector_field(&r1.points, &r2.points, params, Some(embedding.bbox()))?)
}

/// Per-cell mean over the fields supporting each cell.
pub fn mean_field(fields: &[&VectorField]) -> Result<VectorField> {
    let first = fields.first().ok_or(ClusterError::TooFewEntities { found: 0, min: 1 })?;
    if fields.iter().any(|f| !f.same_grid(first)) {
        return Err(CompareError::GridMismatch.into());
    }
    let cells = first.vectors.len();
    let mut vectors = vec![[0.0; 2]; cells];
    let mut support_mask = vec![false; cells];
    for i in 0..cells {
        let (mut s, mut c) = ([0.0, 0.0], 0usize);
        for f in fields.iter().filter(|f| f.support_mask[i]) {
            s[0] += f.vectors[i][0];
            s[1] += f.vectors[i][1];
            c += 1;
        }
        if c > 0 {
            vectors[i] = [s[0] / c as f64, s[1] / c as f64];
            support_mask[i] = true;
        }
    }
    Ok(VectorField {
        bbox: first.bbox,
        n: first.n,
        vectors,
        support_mask,
    })
}

fn mean_spatial(dataset: &EnsembleDataset, members: &[usize], filter: &MonthFilter) -> f64 {
    let steps = dataset.steps_in(filter);
    let s: f64 = members
        .iter()
        .flat_map(|&m| steps.iter().map(move |&t| dataset.spatial_mean(m, t)))
        .sum();
    s / (members.len() * steps.len()).max(1) as f64
}

/// Per month: one forcing field per GCM, cosine distances, embed + cluster,
/// then 1-D placement by the distance between per-cluster mean fields.
/// With fewer GCMs than `min_cluster_size` every GCM is its own singleton.
#[allow(clippy::too_many_arguments)]
pub fn forcing_timeline(
    dataset: &EnsembleDataset,
    index: &BmuIndex,
    gcms: &[String],
    ssp: &str,
    months: &[u8],
    embedding: &Embedding,
    bootstrap: &BootstrapParams,
    params: &ClusterParams,
) -> Result<MonthlyClusterTimeline> {
    check_request(gcms.len(), months)?;
    let per_month = par::map_slice(months, |&month| -> Result<MonthClusters> {
        let filter = month_filter(month)?;
        let fields = gcms
            .iter()
            .map(|g| forcing_field(dataset, index, g, ssp, &filter, embedding, bootstrap))
            .collect::<Result<Vec<_>>>()?;
        let change = gcms
            .iter()
            .map(|g| {
                let fut = mean_spatial(dataset, &members_of(dataset, g, ssp)?, &filter);
                let hist = mean_spatial(dataset, &members_of(dataset, g, "historical")?, &filter);
                Ok(fut - hist)
            })
            .collect::<Result<Vec<f64>>>()?;
        let n = gcms.len();
        let assignment = if n >= params.min_cluster_size {
            let d = symmetric(n, |i, j| field_distance(&fields[i], &fields[j]))?;
            embed_cluster(&DistanceMatrix::new(gcms.to_vec(), d)?, params)?
        } else {
            ClusterAssignment {
                entities: gcms.to_vec(),
                labels: vec![-1; n],
                coords: vec![[0.0, 0.0]; n],
                num_clusters: 0,
            }
        };
        let groups = groups_of(&assignment);
        let means = groups
            .iter()
            .map(|(g, _)| mean_field(&g.iter().map(|&i| &fields[i]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let anomaly: Vec<f64> = groups
            .iter()
            .map(|(g, _)| g.iter().map(|&i| change[i]).sum::<f64>() / g.len() as f64)
            .collect();
        let inter = symmetric(groups.len(), |i, j| field_distance(&means[i], &means[j]))?;
        let pos = place(&inter, &anomaly);
        let clusters = groups
            .into_iter()
            .zip(means)
            .enumerate()
            .map(|(id, ((g, noise), field))| TimelineCluster {
                id,
                noise,
                position: pos[id],
                mean_anomaly: anomaly[id],
                members: g.iter().map(|&i| gcms[i].clone()).collect(),
                aggregate_ref: format!("{month}/{id}"),
                aggregate: Some(ClusterAggregate::Field(field)),
            })
            .collect();
        Ok(MonthClusters {
            month,
            assignment,
            clusters,
        })
    });
    let months = per_month.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MonthlyClusterTimeline {
        lines: lines(gcms, &months),
        months,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_groups_sit_at_half_distance() {
        let d = 2.5;
        let x = place(&[vec![0.0, d], vec![d, 0.0]], &[0.3, -0.1]);
        assert_abs_diff_eq!(x[1], -d / 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(x[0], d / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn single_group_sits_at_zero() {
        assert_eq!(place(&[vec![0.0]], &[1.0]), vec![0.0]);
    }

    #[test]
    fn lowest_anomaly_goes_low() {
        let d = vec![vec![0.0, 1.0, 3.0], vec![1.0, 0.0, 2.0], vec![3.0, 2.0, 0.0]];
        for anomaly in [[0.0, 1.0, 2.0], [2.0, 1.0, 0.0]] {
            let x = place(&d, &anomaly);
            let lo = if anomaly[0] < anomaly[2] { 0 } else { 2 };
            assert!(x.iter().all(|&v| v >= x[lo]));
        }
    }

    #[test]
    fn mean_of_identical_fields_is_the_field() {
        let f = VectorField {
            bbox: BBox {
                min: [0.0, 0.0],
                max: [2.0, 2.0],
            },
            n: 2,
            vectors: vec![[1.0, 0.5], [0.0, 0.0], [-0.25, 2.0], [3.0, 1.0]],
            support_mask: vec![true, false, true, true],
        };
        assert_eq!(mean_field(&[&f, &f, &f]).unwrap(), f);
    }

    #[test]
    fn noise_becomes_singletons() {
        let a = ClusterAssignment {
            entities: vec!["a".into(), "b".into(), "c".into(), "d".into()],
            labels: vec![0, -1, 0, -1],
            coords: vec![[0.0, 0.0]; 4],
            num_clusters: 1,
        };
        assert_eq!(groups_of(&a), vec![(vec![0, 2], false), (vec![1], true), (vec![3], true)]);
    }
}
