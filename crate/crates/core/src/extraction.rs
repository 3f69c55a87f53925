//! Turning clusters of hidden activations into experts: a set of hidden neurons
//! per cluster plus the cluster's mean input token for routing.

use serde::{Deserialize, Serialize};

use crate::clustering::ClusterAssignment;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vit::LayerCapture;

/// How hidden neurons are ranked within a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    /// Per-neuron activation variance over the cluster.
    Variance,
    /// Absolute mean activation over the cluster.
    Magnitude,
    /// Uniformly random neurons, as many as the variance ranking would keep.
    Random,
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "variance" => Ok(Criterion::Variance),
            "magnitude" => Ok(Criterion::Magnitude),
            "random" => Ok(Criterion::Random),
            other => Err(Error::Config(format!(
                "unknown criterion {other:?} (expected variance, magnitude or random)"
            ))),
        }
    }
}

pub const DEFAULT_EXTRACTION_PERCENTAGE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// Share of the cluster's total statistic the kept neurons must cover.
    pub extraction_percentage: f64,
    pub criterion: Criterion,
    /// Seed for the random criterion.
    pub seed: u64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            extraction_percentage: DEFAULT_EXTRACTION_PERCENTAGE,
            criterion: Criterion::Variance,
            seed: 0,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.extraction_percentage;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Config(format!("extraction percentage must lie in (0, 1], got {p}")));
        }
        Ok(())
    }
}

/// One expert: the hidden neurons it keeps and the mean input that routes to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub layer: usize,
    pub expert_id: usize,
    /// Strictly increasing indices into the hidden layer.
    pub neuron_indices: Vec<usize>,
    /// Unit-norm mean input token.
    pub mu: Vec<f32>,
    /// Mean input token before normalization.
    pub raw_mean: Vec<f32>,
    pub member_count: usize,
}

impl ExpertSpec {
    pub fn validate(&self, embed_dim: usize, hidden: usize) -> Result<()> {
        let idx = &self.neuron_indices;
        if idx.is_empty() || idx.windows(2).any(|w| w[0] >= w[1]) || idx.last().is_some_and(|&i| i >= hidden) {
            return Err(Error::Validation(format!(
                "expert {} of layer {} has an empty, unsorted or out-of-range neuron list",
                self.expert_id, self.layer
            )));
        }
        if self.mu.len() != embed_dim || self.raw_mean.len() != embed_dim {
            return Err(Error::Dimension(format!(
                "expert {} of layer {}: mean of width {} for embedding width {embed_dim}",
                self.expert_id,
                self.layer,
                self.mu.len()
            )));
        }
        let n = crate::tensor::norm(&self.mu);
        if (n - 1.0).abs() > 1e-5 {
            return Err(Error::Validation(format!(
                "expert {} of layer {}: mean input has norm {n}, expected 1",
                self.expert_id, self.layer
            )));
        }
        Ok(())
    }
}

fn member_rows(assignment: &ClusterAssignment, cluster: usize, n: usize) -> Result<Vec<usize>> {
    if assignment.labels.len() != n {
        return Err(Error::Dimension(format!(
            "{} labels for {n} records",
            assignment.labels.len()
        )));
    }
    if cluster >= assignment.k {
        return Err(Error::Validation(format!(
            "cluster {cluster} does not exist (k = {})",
            assignment.k
        )));
    }
    Ok(assignment.members(cluster))
}

/// Per-neuron population variance of `y` over the members of `cluster`.
/// Noise points never count.
pub fn cluster_variances(capture: &LayerCapture, assignment: &ClusterAssignment, cluster: usize) -> Result<Tensor> {
    let rows = member_rows(assignment, cluster, capture.len())?;
    if rows.len() < 2 {
        return Err(Error::DegenerateStatistics(format!(
            "cluster {cluster} has {} member(s); variance needs at least 2",
            rows.len()
        )));
    }
    let (mean, _) = column_mean(&capture.y, &rows);
    let mut var = vec![0.0f64; mean.len()];
    for &r in &rows {
        for ((v, &y), &m) in var.iter_mut().zip(capture.y.row(r)).zip(&mean) {
            let d = y as f64 - m;
            *v += d * d;
        }
    }
    let n = rows.len() as f64;
    Ok(Tensor::from_vec(var.into_iter().map(|v| (v / n) as f32).collect()))
}

/// Absolute mean hidden activation per neuron over the members of `cluster`.
pub fn cluster_magnitudes(capture: &LayerCapture, assignment: &ClusterAssignment, cluster: usize) -> Result<Tensor> {
    let rows = member_rows(assignment, cluster, capture.len())?;
    if rows.is_empty() {
        return Err(Error::DegenerateStatistics(format!("cluster {cluster} is empty")));
    }
    let (mean, _) = column_mean(&capture.y, &rows);
    Ok(Tensor::from_vec(mean.into_iter().map(|m| m.abs() as f32).collect()))
}

fn column_mean(t: &Tensor, rows: &[usize]) -> (Vec<f64>, usize) {
    let mut mean = vec![0.0f64; t.last_dim()];
    for &r in rows {
        for (m, &v) in mean.iter_mut().zip(t.row(r)) {
            *m += v as f64;
        }
    }
    let n = rows.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    (mean, rows.len())
}

/// Ranks dimensions by `stat` (descending, ties to the lower index) and returns
/// the shortest prefix whose sum reaches `p` of the total, sorted ascending.
pub fn select_neurons(stat: &Tensor, p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Config(format!("extraction percentage must lie in (0, 1], got {p}")));
    }
    let s = stat.data();
    if s.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::DegenerateStatistics("statistic has negative or non-finite entries".into()));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    // summed in ranking order so that p = 1 stops exactly at the last positive entry
    let total: f64 = order.iter().map(|&i| s[i] as f64).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateStatistics("statistic is zero everywhere".into()));
    }
    let target = p * total;
    let mut acc = 0.0f64;
    let mut take = 0;
    for &i in &order {
        if acc >= target {
            break;
        }
        acc += s[i] as f64;
        take += 1;
    }
    let mut chosen = order[..take].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Mean MLP input over the members of `cluster`, scaled to unit length.
pub fn mean_input(capture: &LayerCapture, assignment: &ClusterAssignment, cluster: usize) -> Result<Tensor> {
    let (unit, _) = mean_input_pair(capture, assignment, cluster)?;
    Ok(Tensor::from_vec(unit))
}

fn mean_input_pair(
    capture: &LayerCapture,
    assignment: &ClusterAssignment,
    cluster: usize,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let rows = member_rows(assignment, cluster, capture.len())?;
    if rows.is_empty() {
        return Err(Error::DegenerateStatistics(format!("cluster {cluster} is empty")));
    }
    let (mean, _) = column_mean(&capture.x, &rows);
    let len = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
    if len < 1e-12 {
        return Err(Error::DegenerateMean(format!(
            "cluster {cluster}: mean input has norm {len:e}"
        )));
    }
    let unit = mean.iter().map(|&m| (m / len) as f32).collect();
    let raw = mean.iter().map(|&m| m as f32).collect();
    Ok((unit, raw))
}

/// One expert per cluster of `assignment`.
pub fn extract_layer(
    capture: &LayerCapture,
    assignment: &ClusterAssignment,
    config: &ExtractionConfig,
) -> Result<Vec<ExpertSpec>> {
    config.validate()?;
    if assignment.k == 0 {
        return Err(Error::Validation(format!(
            "layer {} has no clusters to extract experts from",
            capture.layer
        )));
    }
    let hidden = capture.hidden_dim();
    let mut rng = Rng::derive(config.seed, &format!("extract/{}", capture.layer));
    let mut experts = Vec::with_capacity(assignment.k);
    for c in 0..assignment.k {
        let members = assignment.members(c).len();
        let neuron_indices = match config.criterion {
            Criterion::Variance => select_neurons(&cluster_variances(capture, assignment, c)?, config.extraction_percentage)?,
            Criterion::Magnitude => {
                select_neurons(&cluster_magnitudes(capture, assignment, c)?, config.extraction_percentage)?
            }
            Criterion::Random => {
                let size = select_neurons(&cluster_variances(capture, assignment, c)?, config.extraction_percentage)?.len();
                rng.sample_indices(hidden, size)
            }
        };
        let (mu, raw_mean) = mean_input_pair(capture, assignment, c)?;
        experts.push(ExpertSpec {
            layer: capture.layer,
            expert_id: c,
            neuron_indices,
            mu,
            raw_mean,
            member_count: members,
        });
    }
    Ok(experts)
}

/// Number of top-ranked neurons needed to reach `p` of the total statistic,
/// for variance and for |mean|, per cluster. Shows how concentrated each
/// statistic is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub layer: usize,
    pub fraction: f64,
    pub variance_counts: Vec<usize>,
    pub magnitude_counts: Vec<usize>,
}

pub fn concentration_report(
    capture: &LayerCapture,
    assignment: &ClusterAssignment,
    fraction: f64,
) -> Result<ConcentrationReport> {
    let mut variance_counts = Vec::with_capacity(assignment.k);
    let mut magnitude_counts = Vec::with_capacity(assignment.k);
    for c in 0..assignment.k {
        variance_counts.push(select_neurons(&cluster_variances(capture, assignment, c)?, fraction)?.len());
        magnitude_counts.push(select_neurons(&cluster_magnitudes(capture, assignment, c)?, fraction)?.len());
    }
    Ok(ConcentrationReport {
        layer: capture.layer,
        fraction,
        variance_counts,
        magnitude_counts,
    })
}
