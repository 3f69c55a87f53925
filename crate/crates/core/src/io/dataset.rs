use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled images normalized per channel, with the statistics that were used.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × channels × size × size`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
}

impl Dataset {
    /// Normalizes raw pixels with their own per-channel mean and standard deviation.
    pub fn from_raw(raw: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let (mean, std) = channel_stats(&raw)?;
        Self::with_normalization(raw, labels, class_names, mean, std)
    }

    /// Normalizes raw pixels with externally supplied statistics (e.g. a test split
    /// reusing the training split's).
    pub fn with_normalization(
        raw: Tensor,
        labels: Vec<usize>,
        class_names: Vec<String>,
        mean: Vec<f32>,
        std: Vec<f32>,
    ) -> Result<Self> {
        let (n, c, hw) = dims(&raw)?;
        if labels.len() != n {
            return Err(Error::Validation(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if mean.len() != c || std.len() != c || std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Validation(
                "normalization statistics must have one positive std per channel".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        let mut images = raw;
        for (i, v) in images.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = (*v - mean[ch]) / std[ch];
        }
        Ok(Self {
            images,
            labels,
            class_names,
            norm_mean: mean,
            norm_std: std,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn image_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// Concatenated pixels of the given images.
    pub fn gather(&self, indices: &[usize]) -> Vec<f32> {
        let mut out = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            out.extend_from_slice(self.image(i));
        }
        out
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            images: Tensor::new(shape, self.gather(indices)).expect("consistent shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_names: self.class_names.clone(),
            norm_mean: self.norm_mean.clone(),
            norm_std: self.norm_std.clone(),
        }
    }

    /// Undoes normalization for one image, returning raw pixel values.
    pub fn raw_image(&self, i: usize) -> Vec<f32> {
        let c = self.channels();
        let hw = self.image_len() / c;
        self.image(i)
            .iter()
            .enumerate()
            .map(|(j, &v)| v * self.norm_std[j / hw] + self.norm_mean[j / hw])
            .collect()
    }
}

fn dims(raw: &Tensor) -> Result<(usize, usize, usize)> {
    match raw.shape() {
        [n, c, h, w] if h == w => Ok((*n, *c, h * w)),
        other => Err(Error::Dimension(format!(
            "images must be n×c×s×s, got {other:?}"
        ))),
    }
}

pub fn channel_stats(raw: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let (n, c, hw) = dims(raw)?;
    if n == 0 {
        return Err(Error::Validation("cannot normalize an empty dataset".into()));
    }
    let mut sum = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for (i, &v) in raw.data().iter().enumerate() {
        let ch = (i / hw) % c;
        sum[ch] += v as f64;
        sq[ch] += (v as f64) * (v as f64);
    }
    let count = (n * hw) as f64;
    let mean: Vec<f32> = sum.iter().map(|s| (s / count) as f32).collect();
    let std = sum
        .iter()
        .zip(&sq)
        .map(|(s, q)| {
            let m = s / count;
            let var = (q / count - m * m).max(0.0);
            // constant channels keep unit scale
            if var > 1e-12 {
                var.sqrt() as f32
            } else {
                1.0
            }
        })
        .collect();
    Ok((mean, std))
}
