use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Dataset;
use crate::tensor::Tensor;

use super::engine::{self, PassOptions};
use super::{ModelSpec, ModelWeights, CHUNK};

/// One token's MLP input and hidden activation at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub layer: usize,
    /// Position in the sequence; the class token is 0.
    pub token_index: usize,
    pub image_id: usize,
    pub class_label: usize,
    /// Post-norm MLP input, length `e`.
    pub x: Tensor,
    /// Post-GELU hidden activation, length `hidden`.
    pub y: Tensor,
}

/// All captured tokens of one layer, stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCapture {
    pub layer: usize,
    /// `n × e`
    pub x: Tensor,
    /// `n × hidden`
    pub y: Tensor,
    pub image_id: Vec<u32>,
    pub token_index: Vec<u32>,
    pub class_label: Vec<u32>,
}

impl LayerCapture {
    pub fn len(&self) -> usize {
        self.image_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_id.is_empty()
    }

    pub fn record(&self, i: usize) -> ActivationRecord {
        ActivationRecord {
            layer: self.layer,
            token_index: self.token_index[i] as usize,
            image_id: self.image_id[i] as usize,
            class_label: self.class_label[i] as usize,
            x: Tensor::from_vec(self.x.row(i).to_vec()),
            y: Tensor::from_vec(self.y.row(i).to_vec()),
        }
    }

    /// Packs records of a single layer.
    pub fn from_records(records: &[ActivationRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| Error::Validation("no records to pack".into()))?;
        let (e, h) = (first.x.len(), first.y.len());
        let mut x = Vec::with_capacity(records.len() * e);
        let mut y = Vec::with_capacity(records.len() * h);
        let mut cap = LayerCapture {
            layer: first.layer,
            x: Tensor::zeros(&[0, e]),
            y: Tensor::zeros(&[0, h]),
            image_id: Vec::new(),
            token_index: Vec::new(),
            class_label: Vec::new(),
        };
        for r in records {
            if r.layer != first.layer {
                return Err(Error::Validation(format!(
                    "records mix layers {} and {}",
                    first.layer, r.layer
                )));
            }
            if r.x.len() != e || r.y.len() != h {
                return Err(Error::Dimension("records have inconsistent widths".into()));
            }
            x.extend_from_slice(r.x.data());
            y.extend_from_slice(r.y.data());
            cap.image_id.push(r.image_id as u32);
            cap.token_index.push(r.token_index as u32);
            cap.class_label.push(r.class_label as u32);
        }
        cap.x = Tensor::new(vec![records.len(), e], x)?;
        cap.y = Tensor::new(vec![records.len(), h], y)?;
        Ok(cap)
    }

    pub fn embed_dim(&self) -> usize {
        self.x.last_dim()
    }

    pub fn hidden_dim(&self) -> usize {
        self.y.last_dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureOptions {
    pub layers: Vec<usize>,
    /// Whether class-token rows are recorded alongside patch tokens.
    pub include_class_token: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub layers: Vec<LayerCapture>,
}

impl Capture {
    pub fn layer(&self, layer: usize) -> Option<&LayerCapture> {
        self.layers.iter().find(|c| c.layer == layer)
    }

    pub fn tokens_per_layer(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }
}

/// Runs the dense model over `image_ids` of `dataset` and records every token's
/// MLP input/activation at the requested layers.
pub fn capture_dataset(
    spec: &ModelSpec,
    weights: &ModelWeights,
    dataset: &Dataset,
    image_ids: &[usize],
    opts: &CaptureOptions,
) -> Result<Capture> {
    if let Some(&bad) = opts.layers.iter().find(|&&l| l >= spec.num_layers) {
        return Err(Error::Validation(format!(
            "capture layer {bad} out of range for {} layers",
            spec.num_layers
        )));
    }
    let mut layers_sorted = opts.layers.clone();
    layers_sorted.sort_unstable();
    layers_sorted.dedup();
    let (e, h, s) = (spec.embed_dim, spec.hidden_dim(), spec.seq_len());
    let first_token = if opts.include_class_token { 0 } else { 1 };
    let per_image = s - first_token;

    let chunks: Vec<&[usize]> = image_ids.chunks(CHUNK).collect();
    let parts: Vec<Result<Vec<(Vec<f32>, Vec<f32>)>>> = chunks
        .par_iter()
        .map(|ids| {
            let images = dataset.gather(ids);
            let out = engine::run(
                spec,
                weights,
                &images,
                ids.len(),
                &PassOptions {
                    capture: &layers_sorted,
                    ..Default::default()
                },
            )?;
            Ok(out.captures.into_iter().map(|c| (c.x, c.y)).collect())
        })
        .collect();

    let total = image_ids.len() * per_image;
    let mut xs: Vec<Vec<f32>> = layers_sorted.iter().map(|_| Vec::with_capacity(total * e)).collect();
    let mut ys: Vec<Vec<f32>> = layers_sorted.iter().map(|_| Vec::with_capacity(total * h)).collect();
    for part in parts {
        for (li, (x, y)) in part?.into_iter().enumerate() {
            let rows = x.len() / e;
            for r in 0..rows {
                if r % s < first_token {
                    continue;
                }
                xs[li].extend_from_slice(&x[r * e..(r + 1) * e]);
                ys[li].extend_from_slice(&y[r * h..(r + 1) * h]);
            }
        }
    }
    let mut image_id = Vec::with_capacity(total);
    let mut token_index = Vec::with_capacity(total);
    let mut class_label = Vec::with_capacity(total);
    for &id in image_ids {
        for t in first_token..s {
            image_id.push(id as u32);
            token_index.push(t as u32);
            class_label.push(dataset.labels[id] as u32);
        }
    }
    let layers = layers_sorted
        .iter()
        .zip(xs.into_iter().zip(ys))
        .map(|(&layer, (x, y))| {
            Ok(LayerCapture {
                layer,
                x: Tensor::new(vec![total, e], x)?,
                y: Tensor::new(vec![total, h], y)?,
                image_id: image_id.clone(),
                token_index: token_index.clone(),
                class_label: class_label.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Capture { layers })
}
