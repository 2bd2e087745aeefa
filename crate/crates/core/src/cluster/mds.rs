use nalgebra::{DMatrix, SymmetricEigen};

/// Classical (Torgerson) MDS into `dims` dimensions.
///
/// Eigenpairs are taken by descending eigenvalue, negative eigenvalues are
/// clipped to zero, and each axis is oriented so that its largest-magnitude
/// loading is positive (the first one within 1e-12 wins).
pub fn classical_mds(d: &[Vec<f64>], dims: usize) -> Vec<Vec<f64>> {
    let n = d.len();
    if n == 0 {
        return Vec::new();
    }
    let sq = DMatrix::from_fn(n, n, |i, j| d[i][j] * d[i][j]);
    let row: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let col: Vec<f64> = (0..n).map(|j| sq.column(j).sum() / n as f64).collect();
    let grand = sq.sum() / (n * n) as f64;
    let mut b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row[i] - col[j] + grand));
    b = (&b + b.transpose()) * 0.5;

    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&c)));

    let mut out = vec![vec![0.0; dims]; n];
    for (axis, &k) in order.iter().take(dims).enumerate() {
        let lambda = eig.eigenvalues[k].max(0.0);
        if lambda == 0.0 {
            continue;
        }
        let v = eig.eigenvectors.column(k);
        let peak = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let lead = v.iter().find(|x| x.abs() >= peak - 1e-12).copied().unwrap_or(1.0);
        let s = lambda.sqrt() * lead.signum();
        for i in 0..n {
            out[i][axis] = v[i] * s;
        }
    }
    out
}

/// One-dimensional classical MDS, re-centred at zero.
pub fn mds_1d(d: &[Vec<f64>]) -> Vec<f64> {
    let mut x: Vec<f64> = classical_mds(d, 1).into_iter().map(|r| r[0]).collect();
    if !x.is_empty() {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        x.iter_mut().for_each(|v| *v -= mean);
    }
    x
}
