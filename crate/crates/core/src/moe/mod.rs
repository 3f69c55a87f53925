//! Assembling and running the mixture-of-experts model.
//!
//! A converted layer keeps only the hidden neurons some expert selected
//! (`kept_indices`). Experts are index lists into that compacted layer and share
//! its weights. A token goes to exactly one expert, the one whose mean input is
//! most similar.

mod cost;
mod layer;
mod trace;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

pub use cost::{count_costs, count_dense_costs, routing_overhead_fraction, CostReport, LayerCost, RoutingDistribution};
pub use layer::{route, MoeLayer, RouteMetric};
pub use trace::{RouteEntry, RoutingTrace};

use crate::error::{Error, Result};
use crate::extraction::ExpertSpec;
use crate::tensor::{gelu_scalar, Tensor};
use crate::vit::engine::{self, gather_expert, PassOptions};
use crate::vit::{forward, Ffn, MlpWeights, ModelSpec, ModelWeights, CHUNK};

/// A ViT in which some MLPs were replaced by [`MoeLayer`]s. `experts` keeps the
/// extraction metadata of every converted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub spec: ModelSpec,
    pub weights: ModelWeights,
    pub experts: Vec<ExpertSpec>,
}

impl MoeModel {
    /// Wraps a dense model without converting anything.
    pub fn dense(spec: ModelSpec, weights: ModelWeights) -> Self {
        Self {
            spec,
            weights,
            experts: Vec::new(),
        }
    }

    pub fn converted_layers(&self) -> Vec<usize> {
        (0..self.weights.blocks.len())
            .filter(|&l| self.layer(l).is_some())
            .collect()
    }

    pub fn layer(&self, l: usize) -> Option<&MoeLayer> {
        self.weights.blocks.get(l).and_then(|b| b.ffn.as_moe())
    }

    /// Number of experts per layer, 0 for dense layers.
    pub fn experts_per_layer(&self) -> Vec<usize> {
        self.weights
            .blocks
            .iter()
            .map(|b| b.ffn.as_moe().map_or(0, MoeLayer::num_experts))
            .collect()
    }
}

/// Builds one converted layer from a dense MLP and the layer's experts, which
/// must already be ordered by expert id.
pub fn build_layer(dense: &MlpWeights, experts: &[ExpertSpec], metric: RouteMetric) -> Result<MoeLayer> {
    let (e, h) = dense.w1.dims2()?;
    if experts.is_empty() {
        return Err(Error::Validation("a converted layer needs at least one expert".into()));
    }
    for x in experts {
        x.validate(e, h)?;
    }
    let kept: Vec<usize> = experts
        .iter()
        .flat_map(|x| x.neuron_indices.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut position = vec![usize::MAX; h];
    for (c, &j) in kept.iter().enumerate() {
        position[j] = c;
    }
    let k = kept.len();
    let w1 = dense.w1.data();
    let mut w1c = Vec::with_capacity(e * k);
    for t in 0..e {
        w1c.extend(kept.iter().map(|&j| w1[t * h + j]));
    }
    let b1c = kept.iter().map(|&j| dense.b1.data()[j]).collect();
    let mut w2c = Vec::with_capacity(k * e);
    for &j in &kept {
        w2c.extend_from_slice(dense.w2.row(j));
    }
    let layer = MoeLayer {
        kept_indices: kept.clone(),
        w1c: Tensor::new(vec![e, k], w1c)?,
        b1c: Tensor::new(vec![k], b1c)?,
        w2c: Tensor::new(vec![k, e], w2c)?,
        b2: dense.b2.clone(),
        experts: experts
            .iter()
            .map(|x| x.neuron_indices.iter().map(|&j| position[j]).collect())
            .collect(),
        means: Tensor::new(vec![experts.len(), e], experts.iter().flat_map(|x| x.mu.clone()).collect())?,
        raw_means: Tensor::new(
            vec![experts.len(), e],
            experts.iter().flat_map(|x| x.raw_mean.clone()).collect(),
        )?,
        metric,
    };
    layer.validate(e, h)?;
    Ok(layer)
}

/// Replaces the MLP of every layer that has experts. Layers without experts
/// stay dense.
pub fn assemble(
    spec: &ModelSpec,
    weights: &ModelWeights,
    experts: &[ExpertSpec],
    metric: RouteMetric,
) -> Result<MoeModel> {
    weights.validate(spec)?;
    let mut by_layer: BTreeMap<usize, Vec<ExpertSpec>> = BTreeMap::new();
    for x in experts {
        if x.layer >= spec.num_layers {
            return Err(Error::Validation(format!(
                "expert {} names layer {} but the model has {} layers",
                x.expert_id, x.layer, spec.num_layers
            )));
        }
        by_layer.entry(x.layer).or_default().push(x.clone());
    }
    let mut out = weights.clone();
    let mut kept_specs = Vec::new();
    for (layer, mut list) in by_layer {
        list.sort_by_key(|x| x.expert_id);
        if let Some(w) = list.windows(2).find(|w| w[0].expert_id == w[1].expert_id) {
            return Err(Error::Validation(format!(
                "layer {layer} has duplicate expert id {}",
                w[0].expert_id
            )));
        }
        let dense = out.blocks[layer].ffn.as_dense().ok_or_else(|| {
            Error::Validation(format!("layer {layer} is already converted"))
        })?;
        let moe = build_layer(dense, &list, metric)?;
        out.blocks[layer].ffn = Ffn::Moe(moe);
        kept_specs.extend(list);
    }
    Ok(MoeModel {
        spec: spec.clone(),
        weights: out,
        experts: kept_specs,
    })
}

/// Runs one token through a converted layer: route, then the selected expert's
/// slice of the compacted MLP.
pub fn moe_mlp_forward(layer: &MoeLayer, layer_idx: usize, x: &Tensor) -> Result<Tensor> {
    let e = layer.b2.len();
    if x.len() != e {
        return Err(Error::Dimension(format!("token of width {} for a layer of width {e}", x.len())));
    }
    let expert = layer.route_token(layer_idx, x.data())?;
    let idx = &layer.experts[expert];
    let (w1, b1, w2) = gather_expert(layer, idx, e);
    let m = idx.len();
    let mut hid = vec![0.0f32; m];
    for (c, hc) in hid.iter_mut().enumerate() {
        let mut acc = b1[c];
        for t in 0..e {
            acc += x.data()[t] * w1[t * m + c];
        }
        *hc = gelu_scalar(acc);
    }
    let mut out = layer.b2.data().to_vec();
    for (c, &hc) in hid.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(&w2[c * e..(c + 1) * e]) {
            *o += hc * w;
        }
    }
    Ok(Tensor::from_vec(out))
}

/// Logits of the MoE model.
pub fn moe_forward(model: &MoeModel, images: &Tensor) -> Result<Tensor> {
    forward(&model.spec, &model.weights, images)
}

/// Logits plus the expert chosen for every token of every converted layer.
/// `image_ids` and `labels` label the trace rows.
pub fn moe_forward_traced(
    model: &MoeModel,
    images: &Tensor,
    image_ids: &[usize],
    labels: &[usize],
) -> Result<(Tensor, RoutingTrace)> {
    let spec = &model.spec;
    let len = spec.image_len();
    let n = images.len() / len.max(1);
    if images.shape().len() != 4 || images.shape()[1..] != [spec.channels, spec.image_size, spec.image_size] {
        return Err(Error::Dimension(format!(
            "images must be n×{}×{}×{}, got {:?}",
            spec.channels,
            spec.image_size,
            spec.image_size,
            images.shape()
        )));
    }
    if image_ids.len() != n || labels.len() != n {
        return Err(Error::Dimension(format!(
            "{n} images but {} ids and {} labels",
            image_ids.len(),
            labels.len()
        )));
    }
    let s = spec.seq_len();
    let parts: Vec<Result<(Vec<f32>, Vec<(usize, Vec<u32>)>)>> = images
        .data()
        .par_chunks(CHUNK * len)
        .map(|chunk| {
            let out = engine::run(
                spec,
                &model.weights,
                chunk,
                chunk.len() / len,
                &PassOptions {
                    trace: true,
                    ..Default::default()
                },
            )?;
            Ok((out.logits, out.routes))
        })
        .collect();
    let mut logits = Vec::with_capacity(n * spec.num_classes);
    let mut entries = Vec::new();
    for (ci, part) in parts.into_iter().enumerate() {
        let (l, routes) = part?;
        logits.extend(l);
        for (layer, assign) in routes {
            for (row, &expert) in assign.iter().enumerate() {
                let img = ci * CHUNK + row / s;
                entries.push(RouteEntry {
                    layer,
                    token_index: row % s,
                    image_id: image_ids[img],
                    class_label: labels[img],
                    expert_id: expert as usize,
                });
            }
        }
    }
    entries.sort_by_key(|r| (r.layer, r.image_id, r.token_index));
    Ok((Tensor::new(vec![n, spec.num_classes], logits)?, RoutingTrace { entries }))
}
