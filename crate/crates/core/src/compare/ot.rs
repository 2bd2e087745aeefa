//! Exact discrete optimal transport between uniform point sets.

use serde::{Deserialize, Serialize};

use super::{CompareError, Result};
use crate::geometry::{dist, Point};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransportPair {
    pub source: usize,
    pub target: usize,
    pub mass: f64,
}

/// Ground cost between two points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundCost {
    #[default]
    Euclidean,
    SquaredEuclidean,
}

impl GroundCost {
    pub fn eval(self, p: &Point, q: &Point) -> f64 {
        match self {
            GroundCost::Euclidean => dist(p, q),
            GroundCost::SquaredEuclidean => (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    /// Sorted by `(source, target)`.
    pub pairs: Vec<TransportPair>,
    pub cost: f64,
}

/// Minimum-cost assignment of an `n × n` cost matrix (row-major). Returns the
/// column for every row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    // potentials over 1-based rows/cols, column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Indices grouped by identical coordinates, groups ordered by first index.
fn group_points(points: &[Point]) -> Vec<(Point, Vec<usize>)> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (points[a], points[b]);
        p[0].total_cmp(&q[0]).then(p[1].total_cmp(&q[1])).then(a.cmp(&b))
    });
    let mut groups: Vec<(Point, Vec<usize>)> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some((p, members)) if *p == points[i] => members.push(i),
            _ => groups.push((points[i], vec![i])),
        }
    }
    groups.sort_by_key(|g| g.1[0]);
    groups
}

/// Transportation problem with integer supplies and demands of equal total,
/// solved exactly by successive shortest augmenting paths with potentials.
/// Returns the flow matrix (row-major `supply.len() × demand.len()`).
pub fn min_cost_transport(cost: &[f64], supply: &[u64], demand: &[u64]) -> Vec<u64> {
    let (m, n) = (supply.len(), demand.len());
    let mut flow = vec![0u64; m * n];
    let mut sup = supply.to_vec();
    let mut dem = demand.to_vec();
    // node ids: sources 0..m, sinks m..m+n
    let mut pot = vec![0.0f64; m + n];
    let total = m + n;
    let mut dist_v = vec![0.0f64; total];
    let mut prev = vec![usize::MAX; total];
    let mut done = vec![false; total];
    loop {
        if sup.iter().all(|&s| s == 0) {
            break;
        }
        dist_v.iter_mut().for_each(|d| *d = f64::INFINITY);
        prev.iter_mut().for_each(|p| *p = usize::MAX);
        done.iter_mut().for_each(|d| *d = false);
        for i in 0..m {
            if sup[i] > 0 {
                dist_v[i] = 0.0;
            }
        }
        let mut target = None;
        loop {
            let mut best = None;
            for v in 0..total {
                if !done[v] && dist_v[v].is_finite() && best.is_none_or(|b: usize| dist_v[v] < dist_v[b]) {
                    best = Some(v);
                }
            }
            let Some(v) = best else { break };
            done[v] = true;
            if v >= m {
                if dem[v - m] > 0 {
                    target = Some(v);
                    break;
                }
                // residual backward edges sink → source
                let j = v - m;
                for i in 0..m {
                    if flow[i * n + j] > 0 && !done[i] {
                        let rc = (-cost[i * n + j] + pot[v] - pot[i]).max(0.0);
                        if dist_v[v] + rc < dist_v[i] {
                            dist_v[i] = dist_v[v] + rc;
                            prev[i] = v;
                        }
                    }
                }
            } else {
                for j in 0..n {
                    let w = m + j;
                    if done[w] {
                        continue;
                    }
                    let rc = (cost[v * n + j] + pot[v] - pot[w]).max(0.0);
                    if dist_v[v] + rc < dist_v[w] {
                        dist_v[w] = dist_v[v] + rc;
                        prev[w] = v;
                    }
                }
            }
        }
        let Some(t) = target else { break };
        let dt = dist_v[t];
        for v in 0..total {
            pot[v] += dist_v[v].min(dt);
        }
        // bottleneck along the path
        let mut amount = dem[t - m];
        let mut v = t;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= m {
                amount = amount.min(flow[v * n + (u - m)]);
            }
            v = u;
        }
        amount = amount.min(sup[v]);
        sup[v] -= amount;
        dem[t - m] -= amount;
        let mut v = t;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < m {
                flow[u * n + (v - m)] += amount;
            } else {
                flow[v * n + (u - m)] -= amount;
            }
            v = u;
        }
    }
    flow
}

/// Minimum-cost plan between uniform distributions on `a` and `b` under
/// Euclidean ground cost; `cost` is the earth mover's distance.
pub fn optimal_transport(a: &[Point], b: &[Point]) -> Result<TransportPlan> {
    optimal_transport_with(a, b, GroundCost::Euclidean)
}

/// Minimum-cost plan under the given ground cost. Equal sizes are solved as
/// an assignment problem; otherwise points are merged by position and solved
/// as a transportation problem with integer masses `|b|` per source and `|a|`
/// per sink.
pub fn optimal_transport_with(a: &[Point], b: &[Point], ground: GroundCost) -> Result<TransportPlan> {
    if a.is_empty() || b.is_empty() {
        return Err(CompareError::EmptySet);
    }
    if a.iter().chain(b).flatten().any(|v| !v.is_finite()) {
        return Err(CompareError::NonFinite);
    }
    let (m, n) = (a.len(), b.len());
    if m == n {
        let cost: Vec<f64> = a.iter().flat_map(|p| b.iter().map(move |q| ground.eval(p, q))).collect();
        let assign = hungarian(&cost, n);
        let mass = 1.0 / n as f64;
        let pairs: Vec<TransportPair> = assign
            .iter()
            .enumerate()
            .map(|(i, &j)| TransportPair {
                source: i,
                target: j,
                mass,
            })
            .collect();
        let cost = pairs.iter().map(|p| cost[p.source * n + p.target]).sum::<f64>() * mass;
        return Ok(TransportPlan { pairs, cost });
    }

    let ga = group_points(a);
    let gb = group_points(b);
    let cost: Vec<f64> = ga
        .iter()
        .flat_map(|(p, _)| gb.iter().map(move |(q, _)| ground.eval(p, q)))
        .collect();
    let supply: Vec<u64> = ga.iter().map(|g| (g.1.len() * n) as u64).collect();
    let demand: Vec<u64> = gb.iter().map(|g| (g.1.len() * m) as u64).collect();
    let flow = min_cost_transport(&cost, &supply, &demand);

    // split group flows back onto individual points in index order
    let unit = 1.0 / (m * n) as f64;
    let mut left_a: Vec<u64> = vec![n as u64; m];
    let mut left_b: Vec<u64> = vec![m as u64; n];
    let mut pairs = Vec::new();
    let mut total = 0.0;
    for (gi, (_, ia)) in ga.iter().enumerate() {
        for (gj, (_, ib)) in gb.iter().enumerate() {
            let mut f = flow[gi * gb.len() + gj];
            if f == 0 {
                continue;
            }
            total += f as f64 * cost[gi * gb.len() + gj];
            let (mut x, mut y) = (0, 0);
            while f > 0 {
                while left_a[ia[x]] == 0 {
                    x += 1;
                }
                while left_b[ib[y]] == 0 {
                    y += 1;
                }
                let q = f.min(left_a[ia[x]]).min(left_b[ib[y]]);
                pairs.push(TransportPair {
                    source: ia[x],
                    target: ib[y],
                    mass: q as f64 * unit,
                });
                left_a[ia[x]] -= q;
                left_b[ib[y]] -= q;
                f -= q;
            }
        }
    }
    pairs.sort_by(|p, q| (p.source, p.target).cmp(&(q.source, q.target)));
    // merge duplicate (source, target) pairs
    let mut merged: Vec<TransportPair> = Vec::with_capacity(pairs.len());
    for p in pairs {
        match merged.last_mut() {
            Some(l) if l.source == p.source && l.target == p.target => l.mass += p.mass,
            _ => merged.push(p),
        }
    }
    Ok(TransportPlan {
        pairs: merged,
        cost: total * unit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..=p.len() {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_force(a: &[Point], b: &[Point]) -> f64 {
        permutations(a.len())
            .iter()
            .map(|perm| perm.iter().enumerate().map(|(i, &j)| dist(&a[i], &b[j])).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
            / a.len() as f64
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n).map(|_| [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)]).collect()
    }

    #[test]
    fn single_pair_cost_is_distance() {
        let p = optimal_transport(&[[0.0, 0.0]], &[[3.0, 4.0]]).unwrap();
        assert_eq!(p.cost, 5.0);
        assert_eq!(p.pairs, vec![TransportPair { source: 0, target: 0, mass: 1.0 }]);
    }

    #[test]
    fn identical_sets_cost_zero() {
        let a = [[0.0, 1.0], [2.0, 2.0], [5.0, -1.0]];
        let b = [a[2], a[0], a[1]];
        assert_eq!(optimal_transport(&a, &b).unwrap().cost, 0.0);
    }

    #[test]
    fn hungarian_matches_permutation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let n = rng.random_range(1..=6);
            let a = random_points(&mut rng, n);
            let b = random_points(&mut rng, n);
            let plan = optimal_transport(&a, &b).unwrap();
            assert!((plan.cost - brute_force(&a, &b)).abs() < 1e-9);
        }
    }

    fn gcd(a: usize, b: usize) -> usize {
        if b == 0 { a } else { gcd(b, a % b) }
    }

    #[test]
    fn unequal_sizes_match_replication_oracle() {
        // replicating every point up to lcm(m, n) turns the problem into an
        // equal-size assignment with the same optimum
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let m = rng.random_range(1..=6);
            let n = rng.random_range(1..=6);
            if m == n {
                continue;
            }
            let mut a = random_points(&mut rng, m);
            if m > 2 {
                a[1] = a[0];
            }
            let b = random_points(&mut rng, n);
            let l = m * n / gcd(m, n);
            let ra: Vec<Point> = a.iter().flat_map(|p| std::iter::repeat_n(*p, l / m)).collect();
            let rb: Vec<Point> = b.iter().flat_map(|p| std::iter::repeat_n(*p, l / n)).collect();
            let oracle = optimal_transport(&ra, &rb).unwrap().cost;
            let plan = optimal_transport(&a, &b).unwrap();
            assert!((plan.cost - oracle).abs() < 1e-9, "{} vs {oracle}", plan.cost);
            let mut rows = vec![0.0; m];
            let mut cols = vec![0.0; n];
            for p in &plan.pairs {
                assert!(p.mass > 0.0);
                rows[p.source] += p.mass;
                cols[p.target] += p.mass;
            }
            assert!(rows.iter().all(|r| (r - 1.0 / m as f64).abs() < 1e-9));
            assert!(cols.iter().all(|c| (c - 1.0 / n as f64).abs() < 1e-9));
            let cost: f64 = plan.pairs.iter().map(|p| p.mass * dist(&a[p.source], &b[p.target])).sum();
            assert!((cost - plan.cost).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_set_is_rejected() {
        assert!(matches!(optimal_transport(&[], &[[0.0, 0.0]]), Err(CompareError::EmptySet)));
    }
}
