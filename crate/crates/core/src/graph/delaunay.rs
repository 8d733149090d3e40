//! Bowyer–Watson Delaunay triangulation on exact orientation and in-circle
//! predicates.
//!
//! Degenerate input is handled by fixed rules: points are inserted in
//! lexicographic `(x, y, index)` order and a point exactly on a circumcircle
//! counts as outside, so cocircular sets resolve by insertion order. Exact
//! duplicates are triangulated once; every copy then inherits the
//! representative's edges and is joined to it. Fully collinear sets become a
//! path in order along the line.

use std::collections::HashMap;

use robust::{incircle, orient2d, Coord};

fn c(p: (f64, f64)) -> Coord<f64> {
    Coord { x: p.0, y: p.1 }
}

/// Triangles (CCW vertex indices) of the distinct points in `pts`.
pub fn triangulate(pts: &[(f64, f64)]) -> Vec<[usize; 3]> {
    let n = pts.len();
    if n < 3 {
        return vec![];
    }
    let (mut minx, mut miny, mut maxx, mut maxy) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        minx = minx.min(x);
        miny = miny.min(y);
        maxx = maxx.max(x);
        maxy = maxy.max(y);
    }
    let (cx, cy) = ((minx + maxx) / 2.0, (miny + maxy) / 2.0);
    let span = (maxx - minx).max(maxy - miny).max(1.0) * 1e7;
    let mut all = pts.to_vec();
    all.push((cx - span, cy - span));
    all.push((cx + span, cy - span));
    all.push((cx, cy + span));
    let mut tris: Vec<[usize; 3]> = vec![[n, n + 1, n + 2]];

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pts[a].0.total_cmp(&pts[b].0).then(pts[a].1.total_cmp(&pts[b].1)).then(a.cmp(&b)));

    for &p in &order {
        let pc = c(all[p]);
        let mut keep = Vec::with_capacity(tris.len() + 2);
        let mut boundary: Vec<(usize, usize)> = Vec::new();
        let mut count: HashMap<(usize, usize), usize> = HashMap::new();
        for t in tris {
            if incircle(c(all[t[0]]), c(all[t[1]]), c(all[t[2]]), pc) > 0.0 {
                for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                    *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
                    boundary.push((a, b));
                }
            } else {
                keep.push(t);
            }
        }
        for (a, b) in boundary {
            if count[&(a.min(b), a.max(b))] == 1 {
                keep.push([a, b, p]);
            }
        }
        tris = keep;
    }
    tris.retain(|t| t.iter().all(|&v| v < n));
    tris
}

/// Undirected Delaunay edges `(i, j)`, `i < j`, sorted, over arbitrary points
/// (duplicates and collinear sets included).
pub fn delaunay_edges(pts: &[(f64, f64)]) -> Vec<(usize, usize)> {
    let n = pts.len();
    // representative of each exact duplicate group: its lowest index
    let mut rep = vec![0usize; n];
    let mut first: HashMap<(u64, u64), usize> = HashMap::new();
    let mut distinct = Vec::new();
    for (i, &(x, y)) in pts.iter().enumerate() {
        let key = ((x + 0.0).to_bits(), (y + 0.0).to_bits());
        rep[i] = *first.entry(key).or_insert_with(|| {
            distinct.push(i);
            i
        });
    }
    let dpts: Vec<(f64, f64)> = distinct.iter().map(|&i| pts[i]).collect();

    let mut rep_edges: Vec<(usize, usize)> = Vec::new();
    if dpts.len() == 2 {
        rep_edges.push((0, 1));
    } else if dpts.len() > 2 {
        let collinear = dpts.iter().all(|&q| orient2d(c(dpts[0]), c(dpts[1]), c(q)) == 0.0);
        if collinear {
            let dir = (dpts[1].0 - dpts[0].0, dpts[1].1 - dpts[0].1);
            let mut along: Vec<usize> = (0..dpts.len()).collect();
            let proj = |q: (f64, f64)| (q.0 - dpts[0].0) * dir.0 + (q.1 - dpts[0].1) * dir.1;
            along.sort_by(|&a, &b| proj(dpts[a]).total_cmp(&proj(dpts[b])).then(a.cmp(&b)));
            rep_edges.extend(along.windows(2).map(|w| (w[0], w[1])));
        } else {
            for t in triangulate(&dpts) {
                rep_edges.extend([(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]);
            }
        }
    }

    let mut members: HashMap<usize, Vec<usize>> = HashMap::new();
    for i in 0..n {
        members.entry(rep[i]).or_default().push(i);
    }
    let mut edges = Vec::new();
    for (a, b) in rep_edges {
        let (ra, rb) = (distinct[a], distinct[b]);
        for &u in &members[&ra] {
            for &v in &members[&rb] {
                edges.push((u.min(v), u.max(v)));
            }
        }
    }
    for (&r, group) in &members {
        for &u in group.iter().filter(|&&u| u != r) {
            edges.push((r.min(u), r.max(u)));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    edges
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_configurations() {
        assert!(delaunay_edges(&[(0.0, 0.0)]).is_empty());
        assert_eq!(delaunay_edges(&[(0.0, 0.0), (5.0, 1.0)]), vec![(0, 1)]);
        assert_eq!(delaunay_edges(&[(0.0, 0.0), (3.0, 0.0), (0.0, 4.0)]).len(), 3);
        assert_eq!(delaunay_edges(&[(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (12.0, 12.0)]).len(), 5);
    }

    #[test]
    fn collinear_points_form_a_path() {
        let pts = [(4.0, 4.0), (0.0, 0.0), (2.0, 2.0), (1.0, 1.0)];
        assert_eq!(delaunay_edges(&pts), vec![(0, 2), (1, 3), (2, 3)]);
    }

    #[test]
    fn duplicates_do_not_crash() {
        let pts = [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0), (0.0, 0.0)];
        let e = delaunay_edges(&pts);
        assert!(e.contains(&(0, 3)) && e.contains(&(1, 3)) && e.contains(&(2, 3)));
        assert_eq!(delaunay_edges(&[(1.0, 1.0), (1.0, 1.0)]), vec![(0, 1)]);
    }

    #[test]
    fn cocircular_square_gets_one_diagonal() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        assert_eq!(triangulate(&pts).len(), 2);
        assert_eq!(delaunay_edges(&pts).len(), 5);
    }
}
