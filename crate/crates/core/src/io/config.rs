//! Run configuration, read from TOML. Every section is optional; missing keys
//! take the desk-scale defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::ClusteringConfig;
use crate::error::{Error, Result};
use crate::extraction::ExtractionConfig;
use crate::finetune::FinetuneConfig;
use crate::moe::RouteMetric;
use crate::vit::{ModelSpec, TrainConfig};

use super::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synth: SynthConfig,
    /// Synthetic split sizes. IDX splits use whatever the files hold.
    pub train_images: usize,
    pub test_images: usize,
    pub train_images_path: Option<PathBuf>,
    pub train_labels_path: Option<PathBuf>,
    pub test_images_path: Option<PathBuf>,
    pub test_labels_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synth: SynthConfig::default(),
            train_images: 6000,
            test_images: 1000,
            train_images_path: None,
            train_labels_path: None,
            test_images_path: None,
            test_labels_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptureConfig {
    /// Token budget per layer.
    pub tokens: usize,
    /// Image budget; overrides `tokens` when set.
    pub images: Option<usize>,
    /// Layers to capture and convert; all layers when unset.
    pub layers: Option<Vec<usize>>,
    pub include_class_token: bool,
}

impl Default for CaptureConfig {
    fn default() -> Self {
        Self {
            tokens: 100_000,
            images: None,
            layers: None,
            include_class_token: true,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    #[default]
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingConfig {
    pub metric: MetricName,
}

impl RoutingConfig {
    pub fn route_metric(&self) -> RouteMetric {
        match self.metric {
            MetricName::Cosine => RouteMetric::Cosine,
            MetricName::Euclidean => RouteMetric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Groups of visually similar classes whose routing is compared.
    pub class_groups: Vec<Vec<usize>>,
    /// Image counts for the sample-size stability experiment.
    pub stability_sizes: Vec<usize>,
    pub stability_seeds: Vec<u64>,
    pub patch_layer: Option<usize>,
    pub max_patches: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            class_groups: vec![vec![0, 1], vec![2, 3, 5]],
            stability_sizes: vec![1500, 3000, 4500, 5883],
            stability_seeds: vec![0, 1, 2],
            patch_layer: None,
            max_patches: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub capture: CaptureConfig,
    pub clustering: ClusteringConfig,
    pub extraction: ExtractionConfig,
    pub routing: RoutingConfig,
    pub finetune: FinetuneConfig,
    pub analysis: AnalysisConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelSpec::desk(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            capture: CaptureConfig::default(),
            clustering: ClusteringConfig::default(),
            extraction: ExtractionConfig::default(),
            routing: RoutingConfig::default(),
            // the small model tolerates a far larger step than the
            // ImageNet schedule, and converges in fewer epochs
            finetune: FinetuneConfig {
                epochs: 10,
                lr: 3e-4,
                min_lr: 1e-6,
                ..FinetuneConfig::default()
            },
            analysis: AnalysisConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Layers that are captured and converted.
    pub fn layers(&self) -> Vec<usize> {
        self.capture
            .layers
            .clone()
            .unwrap_or_else(|| (0..self.model.num_layers).collect())
    }

    pub fn tokens_per_image(&self) -> usize {
        self.model.seq_len() - usize::from(!self.capture.include_class_token)
    }

    /// Images needed to meet the capture budget.
    pub fn capture_images(&self) -> usize {
        self.capture
            .images
            .unwrap_or_else(|| self.capture.tokens.div_ceil(self.tokens_per_image()))
    }

    pub fn capture_tokens(&self) -> usize {
        self.capture_images() * self.tokens_per_image()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.clustering.validate()?;
        self.extraction.validate()?;
        self.finetune.validate()?;
        if let Some(&bad) = self.layers().iter().find(|&&l| l >= self.model.num_layers) {
            return Err(Error::Config(format!(
                "layer {bad} out of range for {} layers",
                self.model.num_layers
            )));
        }
        if self.data.source == DataSource::Synthetic {
            let s = &self.data.synth;
            s.validate()?;
            if s.image_size != self.model.image_size || s.channels != self.model.channels {
                return Err(Error::Config(format!(
                    "synthetic images are {}px × {} channels but the model expects {}px × {}",
                    s.image_size, s.channels, self.model.image_size, self.model.channels
                )));
            }
            if s.num_classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "synthetic data has {} classes but the model has {}",
                    s.num_classes, self.model.num_classes
                )));
            }
            if self.capture_images() > self.data.train_images {
                return Err(Error::Config(format!(
                    "capture needs {} images but the training split has {}",
                    self.capture_images(),
                    self.data.train_images
                )));
            }
        } else if self.data.train_images_path.is_none() || self.data.train_labels_path.is_none() {
            return Err(Error::Config("idx data needs train_images_path and train_labels_path".into()));
        }
        let tokens = self.capture_tokens();
        let mcs = self.clustering.min_cluster_size(tokens)?;
        if tokens < mcs {
            return Err(Error::Config(format!(
                "capture of {tokens} tokens is smaller than min_cluster_size {mcs}"
            )));
        }
        if let Some(&c) = self.analysis.class_groups.iter().flatten().find(|&&c| c >= self.model.num_classes) {
            return Err(Error::Config(format!(
                "class group names class {c} but the model has {} classes",
                self.model.num_classes
            )));
        }
        Ok(())
    }
}
