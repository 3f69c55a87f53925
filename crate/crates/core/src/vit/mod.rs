//! A small pre-norm vision transformer: patch embedding, encoder blocks,
//! class-token classifier head.
//!
//! Every block computes `h = x + Attn(LN₁(x))`, `x' = h + MLP(LN₂(h))`. The MLP
//! input captured for expert extraction is `LN₂(h)`, the tensor that multiplies
//! `W1`; the captured hidden activation is the post-GELU vector that `W2`
//! consumes.

mod capture;
pub(crate) mod engine;
mod loss;
mod spec;
mod train;
mod weights;

use rayon::prelude::*;

pub use capture::{capture_dataset, ActivationRecord, Capture, CaptureOptions, LayerCapture};
pub use loss::LossSpec;
pub use spec::{ModelSpec, LAYER_NORM_EPS};
pub use train::{train_base, AdamW, CosineSchedule, TrainConfig, TrainReport};
pub(crate) use train::argmax;
pub use weights::{AttentionWeights, Block, Ffn, MlpWeights, ModelWeights, NormWeights};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use engine::PassOptions;

/// Images per chunk for batched inference and gradient accumulation. Chunking is
/// fixed so results do not depend on the thread count.
pub(crate) const CHUNK: usize = 32;

fn batch_size_of(spec: &ModelSpec, images: &Tensor) -> Result<usize> {
    let expect = [spec.channels, spec.image_size, spec.image_size];
    match images.shape() {
        [n, rest @ ..] if rest == expect => Ok(*n),
        other => Err(Error::Dimension(format!(
            "images must be n×{}×{}×{}, got {other:?}",
            spec.channels, spec.image_size, spec.image_size
        ))),
    }
}

/// Class logits, `batch × num_classes`.
pub fn forward(spec: &ModelSpec, weights: &ModelWeights, images: &Tensor) -> Result<Tensor> {
    let n = batch_size_of(spec, images)?;
    let logits = logits_for(spec, weights, images.data(), n)?;
    Tensor::new(vec![n, spec.num_classes], logits)
}

/// Logits for `n` concatenated images, computed in fixed chunks in parallel.
pub(crate) fn logits_for(spec: &ModelSpec, weights: &ModelWeights, images: &[f32], n: usize) -> Result<Vec<f32>> {
    let len = spec.image_len();
    if images.len() != n * len {
        return Err(Error::Dimension(format!(
            "expected {n} images of {len} values, got {} values",
            images.len()
        )));
    }
    let parts: Vec<Result<Vec<f32>>> = images
        .par_chunks(CHUNK * len)
        .map(|chunk| {
            engine::run(spec, weights, chunk, chunk.len() / len, &PassOptions::default())
                .map(|o| o.logits)
        })
        .collect();
    let mut out = Vec::with_capacity(n * spec.num_classes);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Forward pass that also records one [`ActivationRecord`] per (image, token,
/// requested layer). `labels` supplies each image's class; image ids are batch
/// positions.
pub fn forward_with_capture(
    spec: &ModelSpec,
    weights: &ModelWeights,
    images: &Tensor,
    labels: &[usize],
    layers: &[usize],
) -> Result<(Tensor, Vec<ActivationRecord>)> {
    let n = batch_size_of(spec, images)?;
    if labels.len() != n {
        return Err(Error::Dimension(format!("{n} images but {} labels", labels.len())));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= spec.num_layers) {
        return Err(Error::Validation(format!(
            "capture layer {bad} out of range for {} layers",
            spec.num_layers
        )));
    }
    let out = engine::run(
        spec,
        weights,
        images.data(),
        n,
        &PassOptions {
            capture: layers,
            ..Default::default()
        },
    )?;
    let (e, h, s) = (spec.embed_dim, spec.hidden_dim(), spec.seq_len());
    let mut records = Vec::with_capacity(out.captures.len() * n * s);
    for cap in &out.captures {
        for row in 0..n * s {
            records.push(ActivationRecord {
                layer: cap.layer,
                token_index: row % s,
                image_id: row / s,
                class_label: labels[row / s],
                x: Tensor::from_vec(cap.x[row * e..(row + 1) * e].to_vec()),
                y: Tensor::from_vec(cap.y[row * h..(row + 1) * h].to_vec()),
            });
        }
    }
    Ok((Tensor::new(vec![n, spec.num_classes], out.logits)?, records))
}

/// Mean batch loss and its exact gradient with respect to every trainable tensor.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub loss: f64,
    pub grads: ModelWeights,
}

/// Reverse-mode gradients of the mean batch loss. `teacher_logits` is required
/// whenever `loss.kd_weight > 0`. MoE layers are differentiated through the
/// selected experts with routing decisions held fixed.
pub fn backward(
    spec: &ModelSpec,
    weights: &ModelWeights,
    images: &Tensor,
    labels: &[usize],
    loss: &LossSpec,
    teacher_logits: Option<&Tensor>,
) -> Result<Gradients> {
    let n = batch_size_of(spec, images)?;
    if n != labels.len() {
        return Err(Error::Dimension(format!("{n} images but {} labels", labels.len())));
    }
    let (loss, grads) =
        batch_gradients(spec, weights, images.data(), labels, teacher_logits.map(|t| t.data()), loss)?;
    Ok(Gradients { loss, grads })
}

pub(crate) fn batch_gradients(
    spec: &ModelSpec,
    weights: &ModelWeights,
    images: &[f32],
    labels: &[usize],
    teacher: Option<&[f32]>,
    loss: &LossSpec,
) -> Result<(f64, ModelWeights)> {
    let len = spec.image_len();
    let n = labels.len();
    if images.len() != n * len {
        return Err(Error::Dimension(format!(
            "{} image values for {n} labels",
            images.len()
        )));
    }
    let c = spec.num_classes;
    let chunks: Vec<(usize, usize)> = (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    let parts: Vec<Result<(f64, ModelWeights)>> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let out = engine::run(
                spec,
                weights,
                &images[lo * len..hi * len],
                hi - lo,
                &PassOptions {
                    keep_cache: true,
                    ..Default::default()
                },
            )?;
            let (l, dlogits) = loss::loss_and_grad(
                &out.logits,
                c,
                &labels[lo..hi],
                teacher.map(|t| &t[lo * c..hi * c]),
                loss,
                n,
            )?;
            let cache = out.cache.expect("cache requested");
            Ok((l, engine::backward(spec, weights, &cache, &dlogits)))
        })
        .collect();
    let mut total = 0.0;
    let mut acc: Option<ModelWeights> = None;
    for part in parts {
        let (l, g) = part?;
        total += l;
        match &mut acc {
            None => acc = Some(g),
            Some(a) => add_into(a, &g),
        }
    }
    let grads = acc.unwrap_or_else(|| weights.zeros_like());
    if !total.is_finite() {
        return Err(Error::Numeric(format!("loss is not finite ({total})")));
    }
    Ok((total, grads))
}

fn add_into(acc: &mut ModelWeights, other: &ModelWeights) {
    let mut others = Vec::new();
    other.visit_trainable(|_, t, _| others.push(t.data().to_vec()));
    let mut it = others.into_iter();
    acc.visit_trainable_mut(|_, t, _| {
        let o = it.next().expect("same structure");
        for (a, b) in t.data_mut().iter_mut().zip(o) {
            *a += b;
        }
    });
}

#[cfg(test)]
mod tests;
