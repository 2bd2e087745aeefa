//! Marching squares over a cell-centred scalar grid.

use crate::geometry::Point;

/// Iso-line rings of `values ≥ level` on a `width × height` row-major grid
/// whose sample `(r, c)` sits at `(x0 + (c + ½)·dx, y0 + (r + ½)·dy)`.
///
/// The grid is padded with a ring of zeros, so for `level > 0` every ring is
/// closed. Rings are returned open (last vertex not repeated).
pub fn iso_rings(
    values: &[f64],
    width: usize,
    height: usize,
    origin: Point,
    cell: [f64; 2],
    level: f64,
) -> Vec<Vec<Point>> {
    let pw = width + 2;
    let ph = height + 2;
    let v = |r: usize, c: usize| -> f64 {
        if r == 0 || c == 0 || r > height || c > width {
            0.0
        } else {
            values[(r - 1) * width + (c - 1)]
        }
    };
    let node_xy = |r: usize, c: usize| -> Point {
        [
            origin[0] + (c as f64 - 0.5) * cell[0],
            origin[1] + (r as f64 - 0.5) * cell[1],
        ]
    };
    let h_edge = |r: usize, c: usize| 2 * (r * pw + c);
    let v_edge = |r: usize, c: usize| 2 * (r * pw + c) + 1;
    let crossing = |id: usize| -> Point {
        let base = id / 2;
        let (r, c) = (base / pw, base % pw);
        let (r2, c2) = if id % 2 == 0 { (r, c + 1) } else { (r + 1, c) };
        let (a, b) = (v(r, c), v(r2, c2));
        let t = if b == a { 0.5 } else { ((level - a) / (b - a)).clamp(0.0, 1.0) };
        let (pa, pb) = (node_xy(r, c), node_xy(r2, c2));
        [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])]
    };

    let mut segments: Vec<[usize; 2]> = Vec::new();
    for r in 0..ph - 1 {
        for c in 0..pw - 1 {
            let (bl, br, tr, tl) = (v(r, c), v(r, c + 1), v(r + 1, c + 1), v(r + 1, c));
            let case = (bl >= level) as u8
                | ((br >= level) as u8) << 1
                | ((tr >= level) as u8) << 2
                | ((tl >= level) as u8) << 3;
            let (b, rt, t, l) = (h_edge(r, c), v_edge(r, c + 1), h_edge(r + 1, c), v_edge(r, c));
            let center_in = 0.25 * (bl + br + tr + tl) >= level;
            match case {
                0 | 15 => {}
                1 | 14 => segments.push([l, b]),
                2 | 13 => segments.push([b, rt]),
                3 | 12 => segments.push([l, rt]),
                4 | 11 => segments.push([rt, t]),
                6 | 9 => segments.push([b, t]),
                7 | 8 => segments.push([l, t]),
                5 => {
                    if center_in {
                        segments.push([b, rt]);
                        segments.push([t, l]);
                    } else {
                        segments.push([l, b]);
                        segments.push([rt, t]);
                    }
                }
                10 => {
                    if center_in {
                        segments.push([l, b]);
                        segments.push([rt, t]);
                    } else {
                        segments.push([b, rt]);
                        segments.push([t, l]);
                    }
                }
                _ => unreachable!(),
            }
        }
    }

    // every crossing edge is shared by exactly two segments
    let mut by_edge: std::collections::HashMap<usize, Vec<usize>> = Default::default();
    for (i, s) in segments.iter().enumerate() {
        by_edge.entry(s[0]).or_default().push(i);
        by_edge.entry(s[1]).or_default().push(i);
    }
    let mut used = vec![false; segments.len()];
    let mut rings = Vec::new();
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let first_edge = segments[start][0];
        let mut ring = vec![crossing(first_edge)];
        let mut edge = segments[start][1];
        let mut seg = start;
        while edge != first_edge {
            ring.push(crossing(edge));
            let next = by_edge[&edge].iter().copied().find(|&s| s != seg && !used[s]);
            let Some(next) = next else { break };
            used[next] = true;
            edge = if segments[next][0] == edge {
                segments[next][1]
            } else {
                segments[next][0]
            };
            seg = next;
        }
        if ring.len() >= 3 {
            rings.push(ring);
        }
    }
    rings
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{ring_signed_area, Polygon};

    #[test]
    fn single_hot_cell_gives_one_diamond() {
        let mut vals = vec![0.0; 9];
        vals[4] = 1.0;
        let rings = iso_rings(&vals, 3, 3, [0.0, 0.0], [1.0, 1.0], 0.5);
        assert_eq!(rings.len(), 1);
        assert_eq!(rings[0].len(), 4);
        assert!((ring_signed_area(&rings[0]).abs() - 0.5).abs() < 1e-12);
        assert!(Polygon::from_ring(rings[0].clone()).contains(&[1.5, 1.5]));
    }

    #[test]
    fn two_blobs_two_rings() {
        let w = 7;
        let mut vals = vec![0.0; w * 3];
        vals[w + 1] = 1.0;
        vals[w + 5] = 1.0;
        let rings = iso_rings(&vals, w, 3, [0.0, 0.0], [1.0, 1.0], 0.5);
        assert_eq!(rings.len(), 2);
    }

    #[test]
    fn plateau_ring_encloses_block() {
        let mut vals = vec![0.0; 25];
        for r in 1..4 {
            for c in 1..4 {
                vals[r * 5 + c] = 2.0;
            }
        }
        let rings = iso_rings(&vals, 5, 5, [0.0, 0.0], [1.0, 1.0], 1.0);
        assert_eq!(rings.len(), 1);
        let poly = Polygon::from_ring(rings[0].clone());
        assert!(poly.contains(&[2.5, 2.5]));
        assert!(!poly.contains(&[0.2, 0.2]));
    }
}
