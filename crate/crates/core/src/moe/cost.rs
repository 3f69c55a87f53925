//! Analytic multiply-accumulate and parameter counts. One MAC is one multiply
//! followed by one add; norms, GELU and softmax are not counted.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MoeLayer;
use crate::vit::{ModelSpec, ModelWeights};

/// Per converted layer, the fraction of tokens routed to each expert.
pub type RoutingDistribution = BTreeMap<usize, Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    /// Number of experts, 0 for a dense layer.
    pub experts: usize,
    /// Attention MACs per image.
    pub attention_macs: u64,
    /// Dense MLP MACs per image.
    pub dense_mlp_macs: u64,
    /// Routing MACs per image (`k·e` per token).
    pub routing_macs: u64,
    /// Expected MLP MACs per image including routing.
    pub mlp_macs_expected: f64,
    /// MLP MACs per image including routing if every token took the largest expert.
    pub mlp_macs_worst: u64,
    pub dense_mlp_params: u64,
    /// Compacted MLP weights and biases.
    pub mlp_params: u64,
    /// Stored routing means (`k·e`).
    pub routing_params: u64,
}

/// MACs per image and parameter counts, for the dense model and the model as
/// given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub dense_macs: u64,
    /// Expected MACs per image under the routing distribution.
    pub moe_macs: f64,
    /// MACs per image if every token took the largest expert of its layer.
    pub moe_macs_worst: u64,
    pub routing_overhead_macs: u64,
    pub dense_params: u64,
    /// Parameters including the routing means.
    pub moe_params: u64,
    /// Parameters without the routing means.
    pub moe_weight_params: u64,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    /// `1 − moe/dense` for expected MACs.
    pub fn macs_reduction(&self) -> f64 {
        1.0 - self.moe_macs / self.dense_macs as f64
    }

    pub fn params_reduction(&self) -> f64 {
        1.0 - self.moe_params as f64 / self.dense_params as f64
    }
}

/// Counts costs of `weights` (dense or partly converted). Converted layers
/// missing from `routing` are assumed to spread tokens uniformly.
pub fn count_costs(spec: &ModelSpec, weights: &ModelWeights, routing: &RoutingDistribution) -> CostReport {
    let layers: Vec<Option<&MoeLayer>> = weights.blocks.iter().map(|b| b.ffn.as_moe()).collect();
    costs(spec, &layers, routing)
}

/// Costs of the dense model described by `spec`, without materializing weights.
pub fn count_dense_costs(spec: &ModelSpec) -> CostReport {
    costs(spec, &vec![None; spec.num_layers], &RoutingDistribution::new())
}

/// Routing MACs per token (`k·e`) as a fraction of one token's dense MLP MACs
/// (`2·e·hidden`).
pub fn routing_overhead_fraction(spec: &ModelSpec, k: usize) -> f64 {
    (k * spec.embed_dim) as f64 / (2 * spec.embed_dim * spec.hidden_dim()) as f64
}

fn costs(spec: &ModelSpec, blocks: &[Option<&MoeLayer>], routing: &RoutingDistribution) -> CostReport {
    let e = spec.embed_dim as u64;
    let h = spec.hidden_dim() as u64;
    let s = spec.seq_len() as u64;
    let np = spec.num_patches() as u64;
    let pd = spec.patch_dim() as u64;
    let c = spec.num_classes as u64;

    let embed_macs = np * pd * e;
    let head_macs = e * c;
    let embed_params = pd * e + e + e + s * e;
    let head_params = 2 * e + e * c + c;
    let attention_macs = 4 * s * e * e + 2 * s * s * e;
    // attention projections plus both of the block's norms
    let attention_params = 4 * (e * e + e) + 4 * e;
    let dense_mlp_macs = 2 * s * e * h;
    let dense_mlp_params = 2 * e * h + h + e;

    let mut dense_macs = embed_macs + head_macs;
    let mut moe_macs = (embed_macs + head_macs) as f64;
    let mut moe_macs_worst = embed_macs + head_macs;
    let mut routing_overhead = 0;
    let mut dense_params = embed_params + head_params;
    let mut moe_params = embed_params + head_params;
    let mut moe_weight_params = embed_params + head_params;
    let mut layers = Vec::with_capacity(blocks.len());

    for (l, block) in blocks.iter().enumerate() {
        let mut lc = LayerCost {
            layer: l,
            experts: 0,
            attention_macs,
            dense_mlp_macs,
            routing_macs: 0,
            mlp_macs_expected: dense_mlp_macs as f64,
            mlp_macs_worst: dense_mlp_macs,
            dense_mlp_params,
            mlp_params: dense_mlp_params,
            routing_params: 0,
        };
        if let Some(m) = block {
            let k = m.num_experts() as u64;
            let kept = m.kept_indices.len() as u64;
            let sizes: Vec<u64> = m.experts.iter().map(|x| x.len() as u64).collect();
            let uniform = vec![1.0 / k as f64; k as usize];
            let frac = routing.get(&l).filter(|f| f.len() == k as usize).unwrap_or(&uniform);
            let per_token_expected: f64 = sizes
                .iter()
                .zip(frac)
                .map(|(&sz, &p)| p * (2 * sz * e) as f64)
                .sum();
            let largest = sizes.iter().copied().max().unwrap_or(0);
            lc.experts = k as usize;
            lc.routing_macs = s * k * e;
            lc.mlp_macs_expected = lc.routing_macs as f64 + s as f64 * per_token_expected;
            lc.mlp_macs_worst = lc.routing_macs + s * 2 * largest * e;
            lc.mlp_params = 2 * e * kept + kept + e;
            lc.routing_params = k * e;
        }
        dense_macs += attention_macs + dense_mlp_macs;
        moe_macs += attention_macs as f64 + lc.mlp_macs_expected;
        moe_macs_worst += attention_macs + lc.mlp_macs_worst;
        routing_overhead += lc.routing_macs;
        dense_params += attention_params + dense_mlp_params;
        moe_params += attention_params + lc.mlp_params + lc.routing_params;
        moe_weight_params += attention_params + lc.mlp_params;
        layers.push(lc);
    }
    CostReport {
        dense_macs,
        moe_macs,
        moe_macs_worst,
        routing_overhead_macs: routing_overhead,
        dense_params,
        moe_params,
        moe_weight_params,
        layers,
    }
}
