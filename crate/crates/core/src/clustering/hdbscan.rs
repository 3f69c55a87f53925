//! Hierarchy construction, condensation and excess-of-mass selection on top of
//! the mutual-reachability spanning tree.

use std::collections::HashMap;

use super::mst::{mutual_reachability_mst, MstEdge};
use super::{ClusterAssignment, UnionFind};

/// One merge of the single-linkage dendrogram. Nodes `< n` are points; merge
/// `i` creates node `n + i`.
#[derive(Debug, Clone, Copy)]
struct Merge {
    left: usize,
    right: usize,
    distance: f64,
    size: usize,
}

fn single_linkage(n: usize, edges: &[MstEdge]) -> Vec<Merge> {
    let mut uf = UnionFind::new(2 * n);
    let mut node_of = (0..n).collect::<Vec<_>>();
    node_of.resize(2 * n, 0);
    let mut sizes = vec![1usize; 2 * n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for e in edges {
        let (ra, rb) = (uf.find(e.a), uf.find(e.b));
        let (left, right) = (node_of[ra], node_of[rb]);
        let node = n + merges.len();
        let size = sizes[left] + sizes[right];
        merges.push(Merge {
            left,
            right,
            distance: e.weight,
            size,
        });
        uf.union(ra, rb);
        let root = uf.find(ra);
        node_of[root] = node;
        sizes[node] = size;
    }
    merges
}

/// Entry of the condensed tree: `child` leaves `parent` at density `lambda`.
/// Cluster ids start at `n`; children `< n` are points.
#[derive(Debug, Clone, Copy)]
struct Condensed {
    parent: usize,
    child: usize,
    lambda: f64,
    size: usize,
}

fn lambda_of(distance: f64) -> f64 {
    if distance > 0.0 {
        1.0 / distance
    } else {
        f64::INFINITY
    }
}

/// `a − b` for densities where both may be infinite.
fn span(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        a - b
    }
}

fn condense(n: usize, merges: &[Merge], min_cluster_size: usize) -> Vec<Condensed> {
    let size_of = |node: usize| if node < n { 1 } else { merges[node - n].size };
    let leaves_under = |node: usize, out: &mut Vec<usize>| {
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < n {
                out.push(x);
            } else {
                let m = &merges[x - n];
                stack.push(m.right);
                stack.push(m.left);
            }
        }
    };
    let mut out = Vec::new();
    if merges.is_empty() {
        return out;
    }
    let root = n + merges.len() - 1;
    let mut next_label = n + 1;
    // (dendrogram node, cluster label it belongs to)
    let mut queue = std::collections::VecDeque::from([(root, n)]);
    let mut leaves = Vec::new();
    while let Some((node, label)) = queue.pop_front() {
        if node < n {
            continue;
        }
        let m = merges[node - n];
        let lambda = lambda_of(m.distance);
        if lambda.is_infinite() {
            // points at zero distance cannot be told apart; they stay with the
            // current cluster until its end
            leaves.clear();
            leaves_under(node, &mut leaves);
            for &p in &leaves {
                out.push(Condensed {
                    parent: label,
                    child: p,
                    lambda,
                    size: 1,
                });
            }
            continue;
        }
        let (lc, rc) = (size_of(m.left), size_of(m.right));
        let big_left = lc >= min_cluster_size;
        let big_right = rc >= min_cluster_size;
        if big_left && big_right {
            for (child, size) in [(m.left, lc), (m.right, rc)] {
                out.push(Condensed {
                    parent: label,
                    child: next_label,
                    lambda,
                    size,
                });
                queue.push_back((child, next_label));
                next_label += 1;
            }
        } else {
            for (child, big) in [(m.left, big_left), (m.right, big_right)] {
                if big {
                    queue.push_back((child, label));
                } else {
                    leaves.clear();
                    leaves_under(child, &mut leaves);
                    for &p in &leaves {
                        out.push(Condensed {
                            parent: label,
                            child: p,
                            lambda,
                            size: 1,
                        });
                    }
                }
            }
        }
    }
    out
}

/// Excess-of-mass selection. The root is eligible only when the hierarchy has
/// no split into two clusters at all.
fn select_clusters(n: usize, tree: &[Condensed]) -> Vec<usize> {
    let root = n;
    let mut birth: HashMap<usize, f64> = HashMap::from([(root, 0.0)]);
    let mut children: HashMap<usize, Vec<usize>> = HashMap::new();
    for e in tree {
        if e.child >= n {
            birth.insert(e.child, e.lambda);
            children.entry(e.parent).or_default().push(e.child);
        }
    }
    let mut stability: HashMap<usize, f64> = birth.keys().map(|&c| (c, 0.0)).collect();
    for e in tree {
        let b = birth[&e.parent];
        *stability.get_mut(&e.parent).expect("parent is a cluster") += span(e.lambda, b) * e.size as f64;
    }
    let has_split = children.contains_key(&root);
    if !has_split {
        return if tree.is_empty() { Vec::new() } else { vec![root] };
    }
    let mut nodes: Vec<usize> = stability.keys().copied().filter(|&c| c != root).collect();
    nodes.sort_unstable_by(|a, b| b.cmp(a));
    let mut selected: HashMap<usize, bool> = nodes.iter().map(|&c| (c, true)).collect();
    for &node in &nodes {
        let kids = children.get(&node).map(Vec::as_slice).unwrap_or(&[]);
        let subtree: f64 = kids.iter().map(|c| stability[c]).sum();
        if subtree > stability[&node] {
            selected.insert(node, false);
            stability.insert(node, subtree);
        } else {
            let mut stack: Vec<usize> = kids.to_vec();
            while let Some(c) = stack.pop() {
                selected.insert(c, false);
                if let Some(k) = children.get(&c) {
                    stack.extend(k);
                }
            }
        }
    }
    let mut out: Vec<usize> = selected.into_iter().filter(|&(_, s)| s).map(|(c, _)| c).collect();
    out.sort_unstable();
    out
}

fn label_points(n: usize, tree: &[Condensed], clusters: &[usize]) -> Vec<i32> {
    let root = n;
    let label_of: HashMap<usize, i32> = clusters.iter().enumerate().map(|(i, &c)| (c, i as i32)).collect();
    let max_id = tree.iter().map(|e| e.parent.max(e.child)).max().unwrap_or(root);
    let mut uf = UnionFind::new(max_id + 1);
    for e in tree {
        if !label_of.contains_key(&e.child) {
            uf.union_into(e.parent, e.child);
        }
    }
    let mut labels = vec![-1; n];
    if clusters == [root] {
        // single selected root: only points persisting to the root's densest
        // level belong to it
        let top = tree
            .iter()
            .filter(|e| e.parent == root)
            .map(|e| e.lambda)
            .fold(f64::NEG_INFINITY, f64::max);
        for e in tree {
            if e.child < n && e.lambda >= top {
                labels[e.child] = 0;
            }
        }
        return labels;
    }
    for (p, label) in labels.iter_mut().enumerate() {
        let c = uf.find(p);
        if let Some(&l) = label_of.get(&c) {
            *label = l;
        }
    }
    labels
}

/// Runs HDBSCAN on `n × d` row-major points.
pub(crate) fn run(points: &[f32], d: usize, min_cluster_size: usize, min_samples: usize) -> ClusterAssignment {
    let n = points.len() / d;
    let (edges, _) = mutual_reachability_mst(points, d, min_samples);
    let merges = single_linkage(n, &edges);
    let tree = condense(n, &merges, min_cluster_size);
    let clusters = select_clusters(n, &tree);
    let mut labels = label_points(n, &tree, &clusters);
    let mut k = clusters.len();
    if clusters == [n] && labels.iter().filter(|&&l| l == 0).count() < min_cluster_size {
        // a lone root whose dense core is smaller than a cluster may be
        labels.iter_mut().for_each(|l| *l = -1);
        k = 0;
    }
    ClusterAssignment { k, labels }
}
