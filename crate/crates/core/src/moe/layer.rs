use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::mix;
use crate::tensor::{dot, norm, Tensor};

/// How a token picks its expert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RouteMetric {
    /// Highest cosine similarity to the unit-norm cluster means.
    Cosine,
    /// Smallest Euclidean distance to the raw cluster means.
    Euclidean,
    /// Uniform pseudo-random choice keyed on the token's bits (ablation only).
    Random { seed: u64 },
}

impl std::str::FromStr for RouteMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(RouteMetric::Cosine),
            "euclidean" => Ok(RouteMetric::Euclidean),
            other => Err(Error::Config(format!(
                "unknown routing metric {other:?} (expected cosine or euclidean)"
            ))),
        }
    }
}

/// A converted MLP: the union of all experts' hidden neurons, compacted, plus
/// per-expert index lists into that compacted space and the routing means.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    /// Sorted original hidden-neuron indices that survive.
    pub kept_indices: Vec<usize>,
    /// `e × kept`
    pub w1c: Tensor,
    pub b1c: Tensor,
    /// `kept × e`
    pub w2c: Tensor,
    pub b2: Tensor,
    /// Expert neuron lists remapped into `[0, kept)`, strictly increasing.
    pub experts: Vec<Vec<usize>>,
    /// `k × e`, unit rows.
    pub means: Tensor,
    /// `k × e`, un-normalized cluster means for Euclidean routing.
    pub raw_means: Tensor,
    pub metric: RouteMetric,
}

impl MoeLayer {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn validate(&self, e: usize, hidden: usize) -> Result<()> {
        let kept = self.kept_indices.len();
        if self.kept_indices.windows(2).any(|w| w[0] >= w[1])
            || self.kept_indices.last().is_some_and(|&i| i >= hidden)
        {
            return Err(Error::Validation(
                "kept indices must be strictly increasing and below the hidden width".into(),
            ));
        }
        let shapes_ok = self.w1c.shape() == [e, kept]
            && self.b1c.shape() == [kept]
            && self.w2c.shape() == [kept, e]
            && self.b2.shape() == [e]
            && self.means.shape() == [self.experts.len(), e]
            && self.raw_means.shape() == [self.experts.len(), e];
        if !shapes_ok {
            return Err(Error::Dimension(
                "mixture-of-experts tensors inconsistent with kept set".into(),
            ));
        }
        if self.experts.is_empty() {
            return Err(Error::Validation("a converted layer needs at least one expert".into()));
        }
        for (j, idx) in self.experts.iter().enumerate() {
            if idx.is_empty()
                || idx.windows(2).any(|w| w[0] >= w[1])
                || idx.last().is_some_and(|&i| i >= kept)
            {
                return Err(Error::Validation(format!(
                    "expert {j} has an empty, unsorted or out-of-range index list"
                )));
            }
        }
        Ok(())
    }

    /// Chooses the expert for one token.
    pub fn route_token(&self, layer_idx: usize, x: &[f32]) -> Result<usize> {
        match self.metric {
            RouteMetric::Cosine => route_slice(x, &self.means, RouteMetric::Cosine),
            RouteMetric::Euclidean => route_slice(x, &self.raw_means, RouteMetric::Euclidean),
            RouteMetric::Random { seed } => {
                let mut h = mix(seed ^ mix(layer_idx as u64));
                for v in x {
                    h = mix(h ^ v.to_bits() as u64);
                }
                Ok((h % self.experts.len() as u64) as usize)
            }
        }
    }
}

/// Top-1 routing of a token against `k × e` means.
///
/// Cosine takes `argmax μ_c·x` and expects unit-norm rows in `means`; Euclidean
/// takes `argmin ‖x − m_c‖`. Ties go to the lowest index. Random routing needs a
/// layer context, see [`MoeLayer::route_token`].
pub fn route(x: &Tensor, means: &Tensor, metric: RouteMetric) -> Result<usize> {
    route_slice(x.data(), means, metric)
}

pub(crate) fn route_slice(x: &[f32], means: &Tensor, metric: RouteMetric) -> Result<usize> {
    let (k, e) = means.dims2()?;
    if k == 0 {
        return Err(Error::Routing("no experts to route to".into()));
    }
    if x.len() != e {
        return Err(Error::Dimension(format!(
            "token of width {} routed against means of width {e}",
            x.len()
        )));
    }
    match metric {
        RouteMetric::Cosine => {
            if norm(x) == 0.0 {
                return Err(Error::Routing("cannot route a zero-norm token by cosine".into()));
            }
            let mut best = 0;
            let mut best_score = f32::NEG_INFINITY;
            for c in 0..k {
                let score = dot(means.row(c), x);
                if score > best_score {
                    best = c;
                    best_score = score;
                }
            }
            Ok(best)
        }
        RouteMetric::Euclidean => {
            let mut best = 0;
            let mut best_dist = f32::INFINITY;
            for c in 0..k {
                let d: f32 = means.row(c).iter().zip(x).map(|(m, v)| (m - v) * (m - v)).sum();
                if d < best_dist {
                    best = c;
                    best_dist = d;
                }
            }
            Ok(best)
        }
        RouteMetric::Random { .. } => Err(Error::Routing(
            "random routing is only available through a converted layer".into(),
        )),
    }
}
