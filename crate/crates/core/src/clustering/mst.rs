//! Minimum spanning tree of the mutual-reachability graph.
//!
//! 1. One blocked pass over all pairs keeps each point's `min_samples − 1`
//!    nearest neighbours, giving core distances.
//! 2. Points are visited in increasing core distance; a point joins every
//!    already-visited neighbour in its list. Such an edge weighs exactly the
//!    larger core distance, which is the cheapest edge either endpoint can have,
//!    so these edges belong to a minimum spanning tree.
//! 3. If that leaves several components, an exact pass over cross-component
//!    pairs finds the cheapest mutual-reachability edge between components and
//!    Kruskal finishes the tree.

use serde::{Deserialize, Serialize};

use super::pairwise::Rows;
use super::UnionFind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// Total order used everywhere edges are sorted: weight, then smaller index,
/// then larger index.
pub(crate) fn edge_key(e: &MstEdge) -> (f64, usize, usize) {
    (e.weight, e.a.min(e.b), e.a.max(e.b))
}

pub(crate) fn sort_edges(edges: &mut [MstEdge]) {
    edges.sort_by(|x, y| {
        let (kx, ky) = (edge_key(x), edge_key(y));
        kx.0.total_cmp(&ky.0).then(kx.1.cmp(&ky.1)).then(kx.2.cmp(&ky.2))
    });
}

/// Per-row candidate buffers of `(squared distance, index)`. A full buffer is
/// cut back to its `m` smallest entries, ordered by distance then index.
struct NeighborHeaps {
    m: usize,
    cap: usize,
    entries: Vec<(f32, u32)>,
    len: Vec<u32>,
    /// `m`-th smallest distance seen at the last cut, `+inf` before; anything
    /// above it cannot be among the nearest.
    thresh: Vec<f32>,
}

#[inline]
fn neighbor_order(x: &(f32, u32), y: &(f32, u32)) -> std::cmp::Ordering {
    if x.0 < y.0 {
        std::cmp::Ordering::Less
    } else if x.0 > y.0 {
        std::cmp::Ordering::Greater
    } else {
        x.1.cmp(&y.1)
    }
}

impl NeighborHeaps {
    fn new(n: usize, m: usize) -> Self {
        let cap = if m == 0 { 0 } else { m + (m / 2).max(16) };
        Self {
            m,
            cap,
            entries: vec![(0.0, 0); n * cap],
            len: vec![0; n],
            thresh: vec![f32::INFINITY; n],
        }
    }

    /// Callers check `d <= thresh[row]` first.
    #[inline]
    fn push(&mut self, row: usize, d: f32, j: u32) {
        if self.len[row] as usize == self.cap {
            self.cut(row);
        }
        let len = self.len[row] as usize;
        self.entries[row * self.cap + len] = (d, j);
        self.len[row] += 1;
    }

    fn cut(&mut self, row: usize) {
        let m = self.m;
        let len = self.len[row] as usize;
        if len <= m {
            return;
        }
        let slot = &mut self.entries[row * self.cap..row * self.cap + len];
        slot.select_nth_unstable_by(m - 1, neighbor_order);
        self.thresh[row] = slot[m - 1].0;
        self.len[row] = m as u32;
    }

    fn finish(&mut self) {
        for row in 0..self.len.len() {
            self.cut(row);
        }
    }

    fn kept(&self, row: usize) -> &[(f32, u32)] {
        &self.entries[row * self.cap..row * self.cap + self.len[row] as usize]
    }

    fn neighbors(&self, row: usize) -> impl Iterator<Item = u32> + '_ {
        self.kept(row).iter().map(|e| e.1)
    }

    fn max_dist(&self, row: usize) -> f32 {
        self.kept(row).iter().fold(0.0, |acc: f32, e| acc.max(e.0))
    }
}

/// Core distances: distance to the `min_samples`-th nearest point counting the
/// point itself.
pub fn core_distances(points: &[f32], d: usize, min_samples: usize) -> Vec<f64> {
    let n = points.len() / d.max(1);
    let order: Vec<usize> = (0..n).collect();
    let rows = Rows::new(points, d, &order);
    let heaps = knn_pass(&rows, min_samples.saturating_sub(1).min(n.saturating_sub(1)));
    (0..n).map(|i| (heaps.max_dist(i) as f64).sqrt()).collect()
}

fn knn_pass(rows: &Rows, m: usize) -> NeighborHeaps {
    let mut heaps = NeighborHeaps::new(rows.n, m);
    if m == 0 {
        return heaps;
    }
    let mut buf = Vec::new();
    let nb = rows.num_blocks();
    for bi in 0..nb {
        let ri = rows.block_range(bi);
        for bj in bi..nb {
            let rj = rows.block_range(bj);
            rows.block(bi, bj, &mut buf);
            let nj = rj.len();
            for a in 0..ri.len() {
                let i = ri.start + a;
                let start = if bi == bj { a + 1 } else { 0 };
                let row = &buf[a * nj..(a + 1) * nj];
                let mut ti = heaps.thresh[i];
                for (b, &d2) in row.iter().enumerate().skip(start) {
                    let j = rj.start + b;
                    if d2 <= ti {
                        heaps.push(i, d2, j as u32);
                        ti = heaps.thresh[i];
                    }
                    if d2 <= heaps.thresh[j] {
                        heaps.push(j, d2, i as u32);
                    }
                }
            }
        }
    }
    heaps.finish();
    heaps
}

/// Minimum spanning tree of the mutual-reachability graph over rows of
/// `points` (`n × d`). Returns `n − 1` edges sorted by [`edge_key`].
pub fn mutual_reachability_mst(points: &[f32], d: usize, min_samples: usize) -> (Vec<MstEdge>, Vec<f64>) {
    let n = points.len() / d.max(1);
    if n <= 1 {
        return (Vec::new(), vec![0.0; n]);
    }
    let order: Vec<usize> = (0..n).collect();
    let rows = Rows::new(points, d, &order);
    let heaps = knn_pass(&rows, min_samples.saturating_sub(1).min(n - 1));
    let core2: Vec<f32> = (0..n).map(|i| heaps.max_dist(i)).collect();
    let core: Vec<f64> = core2.iter().map(|&c| (c as f64).sqrt()).collect();
    drop(rows);

    let mut by_core: Vec<usize> = (0..n).collect();
    by_core.sort_by(|&a, &b| core[a].total_cmp(&core[b]).then(a.cmp(&b)));
    let mut rank = vec![0usize; n];
    for (r, &p) in by_core.iter().enumerate() {
        rank[p] = r;
    }
    let mut uf = UnionFind::new(n);
    let mut edges = Vec::with_capacity(n - 1);
    for &u in &by_core {
        let mut nbrs: Vec<u32> = heaps
            .neighbors(u)
            .filter(|&v| rank[v as usize] < rank[u])
            .collect();
        nbrs.sort_unstable();
        for v in nbrs {
            if uf.union(u, v as usize) {
                edges.push(MstEdge {
                    a: u.min(v as usize),
                    b: u.max(v as usize),
                    weight: core[u],
                });
            }
        }
    }
    drop(heaps);

    connect_components(points, d, &core2, &mut uf, &mut edges);
    sort_edges(&mut edges);
    (edges, core)
}

const TABLE_LIMIT: usize = 1024;

/// Adds exact cheapest cross-component edges until one component remains.
///
/// Works on squared distances: `sqrt` is monotone, so the maximum of the
/// squared core distances and the squared distance picks the same edge and,
/// after one `sqrt`, the same weight as `max(core_a, core_b, dist)`.
fn connect_components(points: &[f32], d: usize, core2: &[f32], uf: &mut UnionFind, edges: &mut Vec<MstEdge>) {
    let n = core2.len();
    loop {
        let mut roots: Vec<usize> = (0..n).map(|i| uf.find(i)).collect();
        let mut ids = roots.clone();
        ids.sort_unstable();
        ids.dedup();
        let c = ids.len();
        if c <= 1 {
            return;
        }
        for r in roots.iter_mut() {
            *r = ids.binary_search(r).expect("root listed");
        }
        let comp = roots;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| (comp[i], i));
        let rows = Rows::new(points, d, &order);
        let sorted_core2: Vec<f32> = order.iter().map(|&i| core2[i]).collect();
        let use_table = c <= TABLE_LIMIT;
        let slots = if use_table { c * c } else { c };
        let mut best: Vec<Option<MstEdge>> = vec![None; slots];
        let better = |cur: &Option<MstEdge>, cand: &MstEdge| match cur {
            None => true,
            Some(e) => {
                let (k1, k2) = (edge_key(cand), edge_key(e));
                k1.0.total_cmp(&k2.0).then(k1.1.cmp(&k2.1)).then(k1.2.cmp(&k2.2)).is_lt()
            }
        };
        let mut buf = Vec::new();
        let nb = rows.num_blocks();
        let span = |b: usize| {
            let r = rows.block_range(b);
            (comp[order[r.start]], comp[order[r.end - 1]])
        };
        // runs of equal component inside each block, as (start, end, comp)
        let runs: Vec<Vec<(usize, usize, usize)>> = (0..nb)
            .map(|b| {
                let r = rows.block_range(b);
                let mut out: Vec<(usize, usize, usize)> = Vec::new();
                for k in 0..r.len() {
                    let ck = comp[order[r.start + k]];
                    match out.last_mut() {
                        Some(last) if last.2 == ck => last.1 = k + 1,
                        _ => out.push((k, k + 1, ck)),
                    }
                }
                out
            })
            .collect();
        for bi in 0..nb {
            let (lo_i, hi_i) = span(bi);
            let ri = rows.block_range(bi);
            for bj in bi..nb {
                let (lo_j, hi_j) = span(bj);
                if lo_i == hi_i && lo_j == hi_j && lo_i == lo_j {
                    continue;
                }
                let rj = rows.block_range(bj);
                rows.block(bi, bj, &mut buf);
                let nj = rj.len();
                let cj2 = &sorted_core2[rj.start..rj.end];
                for a in 0..ri.len() {
                    let i = order[ri.start + a];
                    let ci = comp[i];
                    let ci2 = core2[i];
                    let start = if bi == bj { a + 1 } else { 0 };
                    let row = &buf[a * nj..(a + 1) * nj];
                    for &(r0, r1, cj) in &runs[bj] {
                        if cj == ci || r1 <= start {
                            continue;
                        }
                        let r0 = r0.max(start);
                        // smallest index wins ties, and indices rise along a run
                        let mut min_x = f32::INFINITY;
                        let mut min_at = usize::MAX;
                        let mut first_le = usize::MAX;
                        for b in r0..r1 {
                            let x = row[b].max(cj2[b]);
                            if x < min_x || min_at == usize::MAX {
                                min_x = x;
                                min_at = b;
                            }
                            if x <= ci2 && first_le == usize::MAX {
                                first_le = b;
                            }
                        }
                        let (b, w2) = if first_le != usize::MAX {
                            (first_le, ci2)
                        } else if min_at != usize::MAX {
                            (min_at, min_x)
                        } else {
                            continue;
                        };
                        let j = order[rj.start + b];
                        let cand = MstEdge {
                            a: i.min(j),
                            b: i.max(j),
                            weight: (w2 as f64).sqrt(),
                        };
                        if use_table {
                            let slot = ci.min(cj) * c + ci.max(cj);
                            if better(&best[slot], &cand) {
                                best[slot] = Some(cand);
                            }
                        } else {
                            for s in [ci, cj] {
                                if better(&best[s], &cand) {
                                    best[s] = Some(cand);
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut cands: Vec<MstEdge> = best.into_iter().flatten().collect();
        sort_edges(&mut cands);
        for e in cands {
            if uf.union(e.a, e.b) {
                edges.push(e);
            }
        }
    }
}
