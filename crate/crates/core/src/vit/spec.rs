use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of a pre-norm ViT classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Hidden width of every MLP is `mlp_ratio * embed_dim`.
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

pub const LAYER_NORM_EPS: f32 = 1e-6;

impl ModelSpec {
    /// DeiT-Base at 224² resolution.
    pub fn deit_base() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            mlp_ratio: 4.0,
            num_classes: 1000,
        }
    }

    pub fn deit_small() -> Self {
        Self {
            embed_dim: 384,
            num_heads: 6,
            ..Self::deit_base()
        }
    }

    pub fn deit_tiny() -> Self {
        Self {
            embed_dim: 192,
            num_heads: 3,
            ..Self::deit_base()
        }
    }

    /// Four-layer, 64-wide model on 28×28 single-channel images.
    pub fn desk() -> Self {
        Self {
            image_size: 28,
            patch_size: 7,
            channels: 1,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_ratio: 4.0,
            num_classes: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.channels == 0 || self.num_classes == 0 || self.embed_dim == 0 {
            return Err(Error::Config(
                "channels, num_classes and embed_dim must be positive".into(),
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        let hidden = self.mlp_ratio * self.embed_dim as f64;
        if !(hidden >= 1.0) || hidden.fract() != 0.0 {
            return Err(Error::Config(format!(
                "mlp_ratio {} × embed_dim {} must be a positive integer",
                self.mlp_ratio, self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Patches plus the class token.
    pub fn seq_len(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_shapes() {
        let s = ModelSpec::desk();
        s.validate().unwrap();
        assert_eq!(s.seq_len(), 17);
        assert_eq!(s.hidden_dim(), 256);
        assert_eq!(ModelSpec::deit_base().seq_len(), 197);
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut s = ModelSpec::desk();
        s.patch_size = 5;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::desk();
        s.num_heads = 3;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::desk();
        s.mlp_ratio = 3.01;
        assert!(s.validate().is_err());
        let mut s = ModelSpec::desk();
        s.mlp_ratio = 3.0;
        assert!(s.validate().is_ok());
    }
}
