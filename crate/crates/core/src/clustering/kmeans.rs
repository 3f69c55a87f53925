use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::ClusterAssignment;

const MAX_ITERS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub assignment: ClusterAssignment,
    /// `k × d`
    pub centroids: Tensor,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
}

/// Lloyd's algorithm with k-means++ seeding. Every point gets a cluster.
pub fn kmeans(points: &Tensor, k: usize, rng: &mut Rng) -> Result<ClusterAssignment> {
    Ok(kmeans_fit(points, k, rng)?.assignment)
}

fn sq(a: &[f32], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &c)| (x as f64 - c).powi(2)).sum()
}

pub fn kmeans_fit(points: &Tensor, k: usize, rng: &mut Rng) -> Result<KMeansFit> {
    let (n, d) = points.dims2()?;
    if k == 0 || k > n {
        return Err(Error::Config(format!("k = {k} must lie in 1..={n}")));
    }
    let row = |i: usize| points.row(i);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.below(n);
    centroids.push(row(first).iter().map(|&v| v as f64).collect());
    let mut nearest: Vec<f64> = (0..n).map(|i| sq(row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.below(n)
        };
        let c: Vec<f64> = row(pick).iter().map(|&v| v as f64).collect();
        for (i, m) in nearest.iter_mut().enumerate() {
            *m = m.min(sq(row(i), &c));
        }
        centroids.push(c);
    }

    let mut labels = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    let mut iterations = 0;
    loop {
        let mut changed = false;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let dd = sq(row(i), cent);
                if dd < best_d {
                    best = c;
                    best_d = dd;
                }
            }
            changed |= labels[i] != best;
            labels[i] = best;
            dist[i] = best_d;
        }
        if (iterations > 0 && !changed) || iterations == MAX_ITERS {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0f64; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, &v) in sums[labels[i]].iter_mut().zip(row(i)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed from the point farthest from its centroid
                let far = (0..n)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                    .expect("n ≥ 1");
                centroids[c] = row(far).iter().map(|&v| v as f64).collect();
                dist[far] = 0.0;
            } else {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let inertia = dist.iter().sum();
    let data = centroids.iter().flatten().map(|&v| v as f32).collect();
    Ok(KMeansFit {
        assignment: ClusterAssignment {
            labels: labels.iter().map(|&l| l as i32).collect(),
            k,
        },
        centroids: Tensor::new(vec![k, d], data)?,
        inertia,
        iterations,
    })
}
