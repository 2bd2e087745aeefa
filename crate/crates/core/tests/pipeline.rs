use somatlas::cluster::{
    adjusted_rand_index, emd_matrix, embed_cluster, forcing_field, forcing_timeline, monthly_timeline, ClusterError,
    ClusterParams,
};
use somatlas::compare::BootstrapParams;
use somatlas::data::{flatten_samples, generate_synthetic_ensemble, random_archetypes, EnsembleDataset, MonthFilter, SyntheticSpec};
use somatlas::distribution::{project_runs_indexed, BmuIndex};
use somatlas::embed::{embed_grid, Embedding, MdeConfig};
use somatlas::som::{train_som, SomConfig};

fn fit(dataset: &EnsembleDataset, side: usize) -> (BmuIndex, Embedding) {
    let samples = flatten_samples(dataset, &MonthFilter::all()).unwrap();
    let config = SomConfig {
        rows: side,
        cols: side,
        seed: 3,
        ..Default::default()
    };
    let grid = train_som(&samples, &config, None).unwrap();
    let embedding = embed_grid(&grid, &MdeConfig::default()).unwrap();
    (BmuIndex::compute(dataset, &grid).unwrap(), embedding)
}

fn run_fixture() -> EnsembleDataset {
    let mut spec = SyntheticSpec::new(6, 6, 16, random_archetypes(4, 36, 11)).months(vec![1, 2]);
    for i in 0..10 {
        let w = if i % 2 == 0 { vec![1.0, 1.0, 0.0, 0.0] } else { vec![0.0, 0.0, 1.0, 1.0] };
        spec = spec.member(&format!("gcm{i}"), "historical", w);
    }
    generate_synthetic_ensemble(&spec, 5).unwrap().normalize_per_month().unwrap()
}

#[test]
fn run_timeline_separates_mixtures() {
    let dataset = run_fixture();
    let (index, embedding) = fit(&dataset, 6);
    let members: Vec<usize> = (0..10).collect();
    let truth: Vec<i64> = (0..10).map(|i| i % 2).collect();

    let jan = MonthFilter::single(1).unwrap();
    let dists: Vec<_> = members
        .iter()
        .map(|&m| project_runs_indexed(&dataset, &index, &[m], &jan, &embedding).unwrap())
        .collect();
    let keys: Vec<String> = dataset.members.iter().map(|m| m.key()).collect();
    let d = emd_matrix(keys, &dists).unwrap();
    let a = embed_cluster(&d, &ClusterParams::default()).unwrap();
    assert_eq!(adjusted_rand_index(&a.labels, &truth), 1.0, "{:?}", a.labels);

    let t = monthly_timeline(&dataset, &index, &members, &[2, 1], &embedding, &ClusterParams::default()).unwrap();
    assert_eq!(t.months.iter().map(|m| m.month).collect::<Vec<_>>(), vec![2, 1]);
    for m in &t.months {
        assert_eq!(adjusted_rand_index(&m.assignment.labels, &truth), 1.0);
        assert_eq!(m.clusters.len(), 2);
        let sum: f64 = m.clusters.iter().map(|c| c.position).sum();
        assert!(sum.abs() < 1e-9);
        assert_ne!(m.clusters[0].position, m.clusters[1].position);
        let lo = m.clusters.iter().min_by(|a, b| a.mean_anomaly.total_cmp(&b.mean_anomaly)).unwrap();
        assert!(m.clusters.iter().all(|c| c.position >= lo.position));
    }
    for line in &t.lines {
        assert_eq!(line.steps.len(), 2);
        for s in &line.steps {
            let month = t.month(s.month).unwrap();
            let hits = month.clusters.iter().filter(|c| c.members.contains(&line.entity)).count();
            assert_eq!(hits, 1);
            assert!(month.clusters[s.cluster].members.contains(&line.entity));
        }
    }
    let json = serde_json::to_string(&t).unwrap();
    assert!(json.contains("\"aggregate_ref\":\"2/0\""));
}

fn forcing_fixture(gcms: usize) -> EnsembleDataset {
    // Wetting pattern with a positive spatial mean, drying is its negative.
    let base: Vec<f64> = random_archetypes(1, 36, 21)[0].iter().map(|v| v.abs()).collect();
    let archetypes = vec![base.iter().map(|v| -v).collect(), vec![0.0; 36], base];
    let mut spec = SyntheticSpec::new(6, 6, 24, archetypes).months(vec![1]);
    for i in 0..gcms {
        let g = format!("gcm{i}");
        let future = if i % 2 == 0 { vec![0.0, 0.3, 0.7] } else { vec![0.7, 0.3, 0.0] };
        spec = spec.member(&g, "historical", vec![0.0, 1.0, 0.0]).member(&g, "ssp585", future);
    }
    generate_synthetic_ensemble(&spec, 9).unwrap().normalize_per_month().unwrap()
}

#[test]
fn forcing_timeline_separates_opposite_forcings() {
    let dataset = forcing_fixture(6);
    let (index, embedding) = fit(&dataset, 6);
    let gcms: Vec<String> = (0..6).map(|i| format!("gcm{i}")).collect();
    let params = BootstrapParams { k: 8, ..Default::default() };
    let t = forcing_timeline(&dataset, &index, &gcms, "ssp585", &[1], &embedding, &params, &ClusterParams::default())
        .unwrap();
    let m = &t.months[0];
    let truth: Vec<i64> = (0..6).map(|i| i % 2).collect();
    assert_eq!(m.assignment.num_clusters, 2, "{:?}", m.assignment.labels);
    assert_eq!(adjusted_rand_index(&m.assignment.labels, &truth), 1.0);
    // Drying runs have the lower anomaly change and sit low.
    let dry = m.clusters.iter().find(|c| c.members.contains(&"gcm1".to_string())).unwrap();
    assert!(dry.mean_anomaly < 0.0);
    assert!(m.clusters.iter().all(|c| c.position >= dry.position));
}

#[test]
fn single_gcm_is_one_singleton() {
    let dataset = forcing_fixture(1);
    let (index, embedding) = fit(&dataset, 5);
    let params = BootstrapParams { k: 4, ..Default::default() };
    let t = forcing_timeline(
        &dataset,
        &index,
        &["gcm0".to_string()],
        "ssp585",
        &[1],
        &embedding,
        &params,
        &ClusterParams::default(),
    )
    .unwrap();
    let m = &t.months[0];
    assert_eq!(m.clusters.len(), 1);
    assert!(m.clusters[0].noise);
    assert_eq!(m.clusters[0].position, 0.0);
}

#[test]
fn forcing_field_needs_both_members() {
    let dataset = run_fixture();
    let (index, embedding) = fit(&dataset, 4);
    let err = forcing_field(
        &dataset,
        &index,
        "gcm0",
        "ssp585",
        &MonthFilter::all(),
        &embedding,
        &BootstrapParams::default(),
    );
    assert!(matches!(err, Err(ClusterError::MissingMember { .. })));
    let err = forcing_field(
        &dataset,
        &index,
        "nope",
        "historical",
        &MonthFilter::all(),
        &embedding,
        &BootstrapParams::default(),
    );
    assert!(matches!(err, Err(ClusterError::MissingMember { .. })));
}

#[test]
fn identical_forcing_is_near_zero() {
    // Future runs drawn from the same mixture as history.
    let base = &random_archetypes(2, 36, 4);
    let mut spec = SyntheticSpec::new(6, 6, 40, base.clone()).months(vec![1]);
    spec = spec.member("g", "historical", vec![1.0, 1.0]).member("g", "ssp245", vec![1.0, 1.0]);
    let dataset = generate_synthetic_ensemble(&spec, 2).unwrap().normalize_per_month().unwrap();
    let (index, embedding) = fit(&dataset, 5);
    let f = forcing_field(&dataset, &index, "g", "ssp245", &MonthFilter::all(), &embedding, &BootstrapParams::default())
        .unwrap();
    let mean = f.mean_supported().unwrap();
    assert!(mean[0].hypot(mean[1]) < 0.05 * f.bbox.diagonal(), "{mean:?}");
}
