//! Independent f64 reference implementation of the ViT forward pass and loss,
//! used as an oracle by the integration tests.

#![allow(dead_code)]

use std::collections::HashMap;

use moec::moe::{MoeModel, RoutingTrace};
use moec::vit::{Ffn, LossSpec, ModelSpec, ModelWeights, NormWeights};
use moec::{Rng, Tensor};

pub fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn layer_norm(x: &[f64], n: &NormWeights) -> Vec<f64> {
    let e = x.len() as f64;
    let mean = x.iter().sum::<f64>() / e;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / e;
    let inv = 1.0 / (var + 1e-6).sqrt();
    let (g, b) = (f64s(&n.gamma), f64s(&n.beta));
    x.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
}

/// `x (in) · W (in × out) + b`
fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let out = b.len();
    let wd = w.data();
    let mut y = f64s(b);
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..out {
            y[j] += xi * wd[i * out + j] as f64;
        }
    }
    y
}

/// Routing choice for `(layer, image, token)` when it is held fixed.
pub type Routes = HashMap<(usize, usize, usize), usize>;

pub fn routes_from_trace(trace: &RoutingTrace) -> Routes {
    trace
        .entries
        .iter()
        .map(|r| ((r.layer, r.image_id, r.token_index), r.expert_id))
        .collect()
}

/// Logits of one image. Converted layers use `routes` when given, otherwise an
/// f64 cosine/Euclidean argmax against the stored means.
pub fn image_logits(spec: &ModelSpec, w: &ModelWeights, image: &[f32], image_id: usize, routes: Option<&Routes>) -> Vec<f64> {
    let (e, s, p, g, c) = (spec.embed_dim, spec.seq_len(), spec.patch_size, spec.grid(), spec.channels);
    let size = spec.image_size;
    let pos = f64s(&w.pos_embed);
    let mut x: Vec<Vec<f64>> = Vec::with_capacity(s);
    x.push((0..e).map(|i| w.class_token.data()[i] as f64 + pos[i]).collect());
    for py in 0..g {
        for px in 0..g {
            let mut patch = Vec::with_capacity(spec.patch_dim());
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        patch.push(image[ch * size * size + (py * p + dy) * size + px * p + dx] as f64);
                    }
                }
            }
            let t = x.len();
            let emb = affine(&patch, &w.patch_w, &w.patch_b);
            x.push(emb.iter().enumerate().map(|(i, v)| v + pos[t * e + i]).collect());
        }
    }
    let heads = spec.num_heads;
    let dh = e / heads;
    for (l, block) in w.blocks.iter().enumerate() {
        let a = &block.attn;
        let normed: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &a.norm)).collect();
        let q: Vec<Vec<f64>> = normed.iter().map(|r| affine(r, &a.wq, &a.bq)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|r| affine(r, &a.wk, &a.bk)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| affine(r, &a.wv, &a.bv)).collect();
        let mut o = vec![vec![0.0; e]; s];
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            for i in 0..s {
                let scores: Vec<f64> = (0..s)
                    .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = ex.iter().sum();
                for j in 0..s {
                    for d in r.clone() {
                        o[i][d] += ex[j] / z * v[j][d];
                    }
                }
            }
        }
        for i in 0..s {
            let proj = affine(&o[i], &a.wo, &a.bo);
            x[i].iter_mut().zip(proj).for_each(|(xi, pi)| *xi += pi);
        }
        for t in 0..s {
            let m_in = layer_norm(&x[t], &block.norm2);
            let f = match &block.ffn {
                Ffn::Dense(m) => {
                    let hdn: Vec<f64> = affine(&m_in, &m.w1, &m.b1).into_iter().map(gelu).collect();
                    affine(&hdn, &m.w2, &m.b2)
                }
                Ffn::Moe(layer) => {
                    let expert = match routes {
                        Some(r) => r[&(l, image_id, t)],
                        None => {
                            let xf: Vec<f32> = m_in.iter().map(|&v| v as f32).collect();
                            layer.route_token(l, &xf).unwrap()
                        }
                    };
                    let kept = layer.kept_indices.len();
                    let (w1, b1, w2) = (layer.w1c.data(), layer.b1c.data(), layer.w2c.data());
                    let mut out = f64s(&layer.b2);
                    for &n in &layer.experts[expert] {
                        let z = b1[n] as f64 + (0..e).map(|i| m_in[i] * w1[i * kept + n] as f64).sum::<f64>();
                        let y = gelu(z);
                        for j in 0..e {
                            out[j] += y * w2[n * e + j] as f64;
                        }
                    }
                    out
                }
            };
            x[t].iter_mut().zip(f).for_each(|(xi, fi)| *xi += fi);
        }
    }
    let cls = layer_norm(&x[0], &w.final_norm);
    affine(&cls, &w.head_w, &w.head_b)
}

pub fn batch_logits(spec: &ModelSpec, w: &ModelWeights, images: &Tensor, routes: Option<&Routes>) -> Vec<Vec<f64>> {
    let len = spec.image_len();
    images
        .data()
        .chunks(len)
        .enumerate()
        .map(|(i, img)| image_logits(spec, w, img, i, routes))
        .collect()
}

fn log_softmax(row: &[f64], t: f64) -> Vec<f64> {
    let s: Vec<f64> = row.iter().map(|v| v / t).collect();
    let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    s.iter().map(|v| v - lse).collect()
}

/// Mean of `ce_weight·CE + kd_weight·T²·KL(teacher ‖ student)`, times `scale`.
pub fn loss(logits: &[Vec<f64>], labels: &[usize], teacher: Option<&[Vec<f64>]>, spec: &LossSpec) -> f64 {
    let mut total = 0.0;
    for (i, row) in logits.iter().enumerate() {
        let ls = log_softmax(row, 1.0);
        let mut l = -spec.ce_weight * ls[labels[i]];
        if spec.kd_weight > 0.0 {
            let t = spec.temperature;
            let ps = log_softmax(row, t);
            let pt = log_softmax(&teacher.unwrap()[i], t);
            let kl: f64 = pt.iter().zip(&ps).map(|(a, b)| a.exp() * (a - b)).sum();
            l += spec.kd_weight * t * t * kl;
        }
        total += l;
    }
    spec.scale * total / logits.len() as f64
}

/// Tiny model used by gradient and equivalence checks.
pub fn tiny_spec() -> ModelSpec {
    ModelSpec {
        image_size: 8,
        patch_size: 4,
        channels: 1,
        embed_dim: 8,
        num_layers: 2,
        num_heads: 2,
        mlp_ratio: 4.0,
        num_classes: 3,
    }
}

/// Random weights with non-trivial norms and biases (a fresh init has identity
/// norms and zero biases, which hides bugs in their gradients).
pub fn random_weights(spec: &ModelSpec, seed: u64, std: f32) -> ModelWeights {
    let mut rng = Rng::new(seed);
    let mut w = ModelWeights::init(spec, &mut rng).unwrap();
    w.visit_all_mut(|name, t| {
        let base = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        for v in t.data_mut() {
            *v = base + std * rng.normal() as f32;
        }
    });
    w
}

pub fn random_images(spec: &ModelSpec, n: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let data = (0..n * spec.image_len()).map(|_| rng.normal() as f32).collect();
    Tensor::new(vec![n, spec.channels, spec.image_size, spec.image_size], data).unwrap()
}

/// Relative error with an absolute floor for near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central finite differences of `loss_at` for `samples` random coordinates of
/// the trainable tensors. Returns the fraction within `tol`.
pub fn gradient_check(
    weights: &ModelWeights,
    grads: &ModelWeights,
    samples: usize,
    seed: u64,
    tol: f64,
    loss_at: impl Fn(&ModelWeights) -> f64,
) -> (f64, Vec<String>) {
    let mut sizes = Vec::new();
    weights.visit_trainable(|name, t, _| sizes.push((name.to_string(), t.len())));
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let mut flat_grads = Vec::new();
    grads.visit_trainable(|_, t, _| flat_grads.extend(t.data().iter().map(|&v| v as f64)));
    let mut rng = Rng::new(seed);
    let mut ok = 0;
    let mut failures = Vec::new();
    for _ in 0..samples {
        let flat = rng.below(total);
        let (mut which, mut off) = (0, flat);
        while off >= sizes[which].1 {
            off -= sizes[which].1;
            which += 1;
        }
        let orig = {
            let mut v = 0.0f32;
            let mut i = 0;
            weights.visit_trainable(|_, t, _| {
                if i == which {
                    v = t.data()[off];
                }
                i += 1;
            });
            v
        };
        let h = 1e-3f32 * orig.abs().max(1.0);
        let perturbed = |value: f32| {
            let mut w = weights.clone();
            let mut i = 0;
            w.visit_trainable_mut(|_, t, _| {
                if i == which {
                    t.data_mut()[off] = value;
                }
                i += 1;
            });
            w
        };
        let (up, down) = (orig + h, orig - h);
        let numeric = (loss_at(&perturbed(up)) - loss_at(&perturbed(down))) / (up as f64 - down as f64);
        let analytic = flat_grads[flat];
        let err = rel_err(analytic, numeric, 1e-5);
        if err <= tol {
            ok += 1;
        } else {
            failures.push(format!("{}[{off}]: analytic {analytic:e} numeric {numeric:e}", sizes[which].0));
        }
    }
    (ok as f64 / samples as f64, failures)
}

/// Builds a converted model whose experts are random neuron subsets with
/// random unit means.
pub fn random_moe(spec: &ModelSpec, weights: &ModelWeights, layers: &[usize], k: usize, seed: u64) -> MoeModel {
    use moec::extraction::ExpertSpec;
    let mut rng = Rng::new(seed);
    let (e, h) = (spec.embed_dim, spec.hidden_dim());
    let mut experts = Vec::new();
    for &layer in layers {
        for id in 0..k {
            let m = 1 + rng.below(h);
            let mut idx = rng.sample_indices(h, m);
            idx.sort_unstable();
            let raw: Vec<f32> = (0..e).map(|_| rng.normal() as f32).collect();
            let n = raw.iter().map(|v| v * v).sum::<f32>().sqrt();
            experts.push(ExpertSpec {
                layer,
                expert_id: id,
                neuron_indices: idx,
                mu: raw.iter().map(|v| v / n).collect(),
                raw_mean: raw,
                member_count: 10,
            });
        }
    }
    moec::moe::assemble(spec, weights, &experts, moec::moe::RouteMetric::Cosine).unwrap()
}
