//! Procedural shapes dataset. Each class is a fixed geometric figure; images
//! vary in brightness, pixel noise and (with three channels) a class tint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    /// 1 (gray) or 3 (tinted per class).
    pub channels: usize,
    pub num_classes: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f32,
    /// Brightness is drawn uniformly from `[1 − brightness_jitter, 1]`.
    pub brightness_jitter: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 28,
            channels: 1,
            num_classes: 10,
            noise: 0.05,
            brightness_jitter: 0.3,
        }
    }
}

const BASE_SHAPES: &[&str] = &[
    "horizontal bar",
    "vertical bar",
    "diagonal",
    "anti-diagonal",
    "plus",
    "cross",
    "square",
    "frame",
    "ring",
    "disk",
    "triangle",
    "corners",
];

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(Error::Config(format!("synthetic images need at least 8 pixels, got {}", self.image_size)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if self.num_classes < 1 || self.num_classes > BASE_SHAPES.len() * 4 {
            return Err(Error::Config(format!(
                "num_classes must lie in 1..={}, got {}",
                BASE_SHAPES.len() * 4,
                self.num_classes
            )));
        }
        if !(self.noise >= 0.0) || !(0.0..1.0).contains(&self.brightness_jitter) {
            return Err(Error::Config("noise must be ≥ 0 and brightness_jitter in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes)
            .map(|c| {
                let shape = BASE_SHAPES[c % BASE_SHAPES.len()];
                match c / BASE_SHAPES.len() {
                    0 => shape.to_string(),
                    v => format!("{shape} ({})", ["small", "left", "right"][v - 1]),
                }
            })
            .collect()
    }

    /// Noise-free single-channel figure of class `class`, values in `{0, 1}`.
    pub fn template(&self, class: usize) -> Vec<f32> {
        let s = self.image_size as f32;
        let variant = class / BASE_SHAPES.len();
        // variants shrink or shift the figure
        let (scale, shift) = match variant {
            0 => (1.0, 0.0),
            1 => (0.55, 0.0),
            2 => (0.6, -0.2),
            _ => (0.6, 0.2),
        };
        let mut img = vec![0.0f32; self.image_size * self.image_size];
        for r in 0..self.image_size {
            for c in 0..self.image_size {
                // centered coordinates in [-1, 1]
                let y = ((r as f32 + 0.5) / s * 2.0 - 1.0) / scale;
                let x = ((c as f32 + 0.5) / s * 2.0 - 1.0 - shift) / scale;
                let on = match class % BASE_SHAPES.len() {
                    0 => y.abs() < 0.22 && x.abs() < 0.8,
                    1 => x.abs() < 0.22 && y.abs() < 0.8,
                    2 => (x - y).abs() < 0.3 && x.abs() < 0.8 && y.abs() < 0.8,
                    3 => (x + y).abs() < 0.3 && x.abs() < 0.8 && y.abs() < 0.8,
                    4 => (x.abs() < 0.2 || y.abs() < 0.2) && x.abs() < 0.8 && y.abs() < 0.8,
                    5 => ((x - y).abs() < 0.25 || (x + y).abs() < 0.25) && x.abs() < 0.75 && y.abs() < 0.75,
                    6 => x.abs() < 0.5 && y.abs() < 0.5,
                    7 => x.abs().max(y.abs()) < 0.8 && x.abs().max(y.abs()) > 0.5,
                    8 => {
                        let d = (x * x + y * y).sqrt();
                        d > 0.45 && d < 0.8
                    }
                    9 => (x * x + y * y).sqrt() < 0.45,
                    10 => y < 0.6 && y > -0.7 && x.abs() < (y + 0.7) * 0.6,
                    _ => x.abs() > 0.4 && y.abs() > 0.4 && x.abs() < 0.85 && y.abs() < 0.85,
                };
                if on {
                    img[r * self.image_size + c] = 1.0;
                }
            }
        }
        img
    }

    fn tint(&self, class: usize) -> [f32; 3] {
        let h = class as f32 / self.num_classes as f32;
        [
            0.6 + 0.4 * (std::f32::consts::TAU * h).cos().abs(),
            0.6 + 0.4 * (std::f32::consts::TAU * (h + 0.33)).cos().abs(),
            0.6 + 0.4 * (std::f32::consts::TAU * (h + 0.66)).cos().abs(),
        ]
    }
}

/// Raw (unnormalized) images and labels. Labels cycle through the classes and
/// are then shuffled, so classes are balanced.
pub fn synth_raw(config: &SynthConfig, n: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
    config.validate()?;
    let (s, ch) = (config.image_size, config.channels);
    let templates: Vec<Vec<f32>> = (0..config.num_classes).map(|c| config.template(c)).collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % config.num_classes).collect();
    rng.shuffle(&mut labels);
    let mut data = Vec::with_capacity(n * ch * s * s);
    for &label in &labels {
        let brightness = 1.0 - config.brightness_jitter * rng.uniform() as f32;
        let tint = if ch == 3 { config.tint(label) } else { [1.0; 3] };
        for &t in tint.iter().take(ch) {
            for &p in &templates[label] {
                data.push(p * brightness * t + config.noise * rng.normal() as f32);
            }
        }
    }
    Ok((Tensor::new(vec![n, ch, s, s], data)?, labels))
}

/// Normalized synthetic dataset of `n` images.
pub fn synth_dataset(config: &SynthConfig, n: usize, rng: &mut Rng) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("synthetic dataset needs at least one image".into()));
    }
    let (raw, labels) = synth_raw(config, n, rng)?;
    Dataset::from_raw(raw, labels, config.class_names())
}

/// Train and test splits from independent streams; the test split is
/// normalized with the training statistics.
pub fn synth_split(config: &SynthConfig, n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let train = synth_dataset(config, n_train, &mut Rng::derive(seed, "synth/train"))?;
    let (raw, labels) = synth_raw(config, n_test, &mut Rng::derive(seed, "synth/test"))?;
    let test = Dataset::with_normalization(
        raw,
        labels,
        config.class_names(),
        train.norm_mean.clone(),
        train.norm_std.clone(),
    )?;
    Ok((train, test))
}
