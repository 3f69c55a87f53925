//! Density-based clustering of token activations (HDBSCAN) and a K-Means
//! baseline.
//!
//! ```
//! use moec::clustering::{hdbscan, ClusteringConfig};
//! use moec::Tensor;
//!
//! let mut pts = Vec::new();
//! for i in 0..40 {
//!     let j = (i % 10) as f32 * 0.01;
//!     let c = if i < 20 { 0.0 } else { 5.0 };
//!     pts.extend([c + j, c - j]);
//! }
//! let pts = Tensor::new(vec![40, 2], pts).unwrap();
//! let found = hdbscan(&pts, &ClusteringConfig::with_min_cluster_size(8)).unwrap();
//! assert_eq!(found.k, 2);
//! ```

mod hdbscan;
mod kmeans;
pub mod mst;
pub(crate) mod pairwise;

use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, kmeans_fit, KMeansFit};
pub use mst::{core_distances, mutual_reachability_mst, MstEdge};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::LayerCapture;

/// Fraction of captured tokens used as minimum cluster size by default.
pub const DEFAULT_MIN_CLUSTER_FRACTION: f64 = 0.006;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringConfig {
    /// Minimum cluster size as a fraction of the number of points.
    pub min_cluster_size_fraction: f64,
    /// Absolute minimum cluster size; overrides the fraction when set.
    pub min_cluster_size: Option<usize>,
    /// Neighbourhood size for core distances; defaults to the minimum cluster size.
    pub min_samples: Option<usize>,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            min_cluster_size_fraction: DEFAULT_MIN_CLUSTER_FRACTION,
            min_cluster_size: None,
            min_samples: None,
        }
    }
}

impl ClusteringConfig {
    pub fn with_fraction(fraction: f64) -> Self {
        Self {
            min_cluster_size_fraction: fraction,
            ..Self::default()
        }
    }

    pub fn with_min_cluster_size(size: usize) -> Self {
        Self {
            min_cluster_size: Some(size),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.min_cluster_size_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!(
                "min_cluster_size_fraction must lie in (0, 1), got {f}"
            )));
        }
        if self.min_cluster_size.is_some_and(|m| m < 2) {
            return Err(Error::Config("min_cluster_size must be at least 2".into()));
        }
        if self.min_samples == Some(0) {
            return Err(Error::Config("min_samples must be positive".into()));
        }
        Ok(())
    }

    /// Minimum cluster size for `n` points. Fails if it is below 2 or above `n`.
    pub fn min_cluster_size(&self, n: usize) -> Result<usize> {
        self.validate()?;
        let m = match self.min_cluster_size {
            Some(m) => m,
            None => {
                let m = (self.min_cluster_size_fraction * n as f64).round() as usize;
                if m < 2 {
                    return Err(Error::Config(format!(
                        "min_cluster_size {m} (fraction {} of {n} points) is below 2",
                        self.min_cluster_size_fraction
                    )));
                }
                m
            }
        };
        if n < m {
            return Err(Error::Config(format!(
                "{n} points is fewer than min_cluster_size {m}"
            )));
        }
        Ok(m)
    }

    pub fn min_samples(&self, n: usize) -> Result<usize> {
        Ok(self.min_samples.unwrap_or(self.min_cluster_size(n)?))
    }
}

/// Cluster label per point (`-1` is noise) and the number of clusters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<i32>,
    pub k: usize,
}

impl ClusterAssignment {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Indices of the members of `cluster`, ascending.
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == cluster as i32)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l < 0).count()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l < -1 || l >= self.k as i32) {
            return Err(Error::Validation(format!("label {bad} outside -1..{}", self.k)));
        }
        Ok(())
    }
}

/// Disjoint-set forest with path halving.
#[derive(Debug, Clone)]
pub(crate) struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn find(&mut self, mut i: usize) -> usize {
        while self.parent[i] != i {
            self.parent[i] = self.parent[self.parent[i]];
            i = self.parent[i];
        }
        i
    }

    /// Joins two sets by size; false if they were already one.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }

    /// Joins `child`'s set under `parent`'s root.
    pub fn union_into(&mut self, parent: usize, child: usize) {
        let (rp, rc) = (self.find(parent), self.find(child));
        if rp != rc {
            self.parent[rc] = rp;
            self.size[rp] += self.size[rc];
        }
    }
}

/// HDBSCAN with Euclidean distances and excess-of-mass selection on the rows of
/// an `n × d` tensor.
pub fn hdbscan(points: &Tensor, config: &ClusteringConfig) -> Result<ClusterAssignment> {
    let (n, d) = points.dims2()?;
    if d == 0 {
        return Err(Error::Dimension("points need at least one dimension".into()));
    }
    let mcs = config.min_cluster_size(n)?;
    let ms = config.min_samples(n)?;
    hdbscan_with_sizes(points, mcs, ms)
}

/// HDBSCAN with explicit minimum cluster size and neighbourhood size.
pub fn hdbscan_with_sizes(points: &Tensor, min_cluster_size: usize, min_samples: usize) -> Result<ClusterAssignment> {
    let (n, d) = points.dims2()?;
    if min_cluster_size < 2 || min_samples == 0 {
        return Err(Error::Config(format!(
            "min_cluster_size {min_cluster_size} must be ≥ 2 and min_samples {min_samples} ≥ 1"
        )));
    }
    if n < min_cluster_size {
        return Err(Error::Config(format!(
            "{n} points is fewer than min_cluster_size {min_cluster_size}"
        )));
    }
    if !points.is_finite() {
        return Err(Error::Numeric("points contain non-finite values".into()));
    }
    Ok(hdbscan::run(points.data(), d, min_cluster_size, min_samples))
}

/// Clusters one layer's hidden activations. `k = 0` means the layer has no
/// experts and stays dense.
pub fn cluster_layer_activations(capture: &LayerCapture, config: &ClusteringConfig) -> Result<ClusterAssignment> {
    hdbscan(&capture.y, config)
}
