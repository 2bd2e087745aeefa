//! HDBSCAN over points in the plane: mutual reachability, minimum spanning
//! tree, condensed tree, excess-of-mass selection.

use crate::geometry::{dist, Point};

struct Merge {
    left: usize,
    right: usize,
    distance: f64,
    size: usize,
}

struct Condensed {
    parent: usize,
    /// Point index, or `n + cluster` for a child cluster.
    child: usize,
    lambda: f64,
    size: usize,
}

/// Labels every point with a cluster id (dense, ordered by lowest member)
/// or `-1` for noise. The root cluster is never selected.
///
/// Requires `2 <= min_cluster_size <= n` and `1 <= min_samples <= n`.
pub fn hdbscan(points: &[Point], min_cluster_size: usize, min_samples: usize) -> Vec<i64> {
    let n = points.len();
    assert!(min_cluster_size >= 2 && min_cluster_size <= n && min_samples >= 1 && min_samples <= n);

    // Core distance counts the point itself.
    let core: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = points.iter().map(|q| dist(&points[i], q)).collect();
            d.sort_by(f64::total_cmp);
            d[min_samples - 1]
        })
        .collect();
    let reach = |i: usize, j: usize| dist(&points[i], &points[j]).max(core[i]).max(core[j]);

    // Prim on the dense mutual-reachability graph.
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges: Vec<(usize, usize, f64)> = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        for v in 0..n {
            if !in_tree[v] {
                let w = reach(current, v);
                if w < best[v] {
                    best[v] = w;
                    from[v] = current;
                }
            }
        }
        let next = (0..n)
            .filter(|&v| !in_tree[v])
            .min_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)))
            .unwrap();
        edges.push((from[next], next, best[next]));
        in_tree[next] = true;
        current = next;
    }
    edges.sort_by(|a, b| a.2.total_cmp(&b.2));

    // Single-linkage dendrogram; node `n + k` is the k-th merge.
    let mut uf: Vec<usize> = (0..2 * n - 1).collect();
    fn find(uf: &mut [usize], mut x: usize) -> usize {
        while uf[x] != x {
            uf[x] = uf[uf[x]];
            x = uf[x];
        }
        x
    }
    let mut merges: Vec<Merge> = Vec::with_capacity(n - 1);
    let mut sizes = vec![1usize; 2 * n - 1];
    for (a, b, w) in edges {
        let (ra, rb) = (find(&mut uf, a), find(&mut uf, b));
        let node = n + merges.len();
        sizes[node] = sizes[ra] + sizes[rb];
        uf[ra] = node;
        uf[rb] = node;
        merges.push(Merge {
            left: ra,
            right: rb,
            distance: w,
            size: sizes[node],
        });
    }

    let scale = merges.iter().map(|m| m.distance).fold(0.0, f64::max);
    let floor = if scale > 0.0 { scale * 1e-12 } else { 1.0 };
    let lambda_of = |d: f64| 1.0 / d.max(floor);
    let size_of = |node: usize| if node < n { 1 } else { merges[node - n].size };
    let leaves = |node: usize| {
        let mut out = Vec::new();
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                stack.push(merges[x - n].right);
                stack.push(merges[x - n].left);
            }
        }
        out
    };

    // Condense top-down; clusters are numbered in creation order, so every
    // child has a larger id than its parent.
    let root = 2 * n - 2;
    let mut cluster_of = vec![usize::MAX; 2 * n - 1];
    cluster_of[root] = 0;
    let mut birth = vec![0.0f64];
    let mut parent_of = vec![usize::MAX];
    let mut tree: Vec<Condensed> = Vec::new();
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(node) = queue.pop_front() {
        if node < n {
            continue;
        }
        let m = &merges[node - n];
        let c = cluster_of[node];
        let lambda = lambda_of(m.distance);
        let (l, r) = (m.left, m.right);
        let (big_l, big_r) = (size_of(l) >= min_cluster_size, size_of(r) >= min_cluster_size);
        for (child, big, other_big) in [(l, big_l, big_r), (r, big_r, big_l)] {
            if big && other_big {
                let id = birth.len();
                birth.push(lambda);
                parent_of.push(c);
                cluster_of[child] = id;
                tree.push(Condensed {
                    parent: c,
                    child: n + id,
                    lambda,
                    size: size_of(child),
                });
                queue.push_back(child);
            } else if big {
                cluster_of[child] = c;
                queue.push_back(child);
            } else {
                for p in leaves(child) {
                    tree.push(Condensed {
                        parent: c,
                        child: p,
                        lambda,
                        size: 1,
                    });
                }
            }
        }
    }

    let clusters = birth.len();
    let mut stability = vec![0.0f64; clusters];
    for e in &tree {
        stability[e.parent] += (e.lambda - birth[e.parent]) * e.size as f64;
    }
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); clusters];
    for c in 1..clusters {
        children[parent_of[c]].push(c);
    }

    // Excess of mass, leaves first.
    let mut selected = vec![false; clusters];
    let mut subtree = vec![0.0f64; clusters];
    for c in (1..clusters).rev() {
        let below: f64 = children[c].iter().map(|&k| subtree[k]).sum();
        if !children[c].is_empty() && below > stability[c] {
            subtree[c] = below;
        } else {
            subtree[c] = stability[c];
            selected[c] = true;
            let mut stack = children[c].clone();
            while let Some(k) = stack.pop() {
                selected[k] = false;
                stack.extend_from_slice(&children[k]);
            }
        }
    }

    let mut raw = vec![-1i64; n];
    for e in tree.iter().filter(|e| e.child < n) {
        let mut c = e.parent;
        loop {
            if selected[c] {
                raw[e.child] = c as i64;
                break;
            }
            if c == 0 {
                break;
            }
            c = parent_of[c];
        }
    }
    densify(&raw)
}

/// Renumbers non-negative labels 0.. in order of first appearance.
pub(crate) fn densify(raw: &[i64]) -> Vec<i64> {
    let mut map = std::collections::HashMap::new();
    raw.iter()
        .map(|&l| {
            if l < 0 {
                -1
            } else {
                let next = map.len() as i64;
                *map.entry(l).or_insert(next)
            }
        })
        .collect()
}
