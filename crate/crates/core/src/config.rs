//! Model and training hyperparameters.

use crate::error::{Error, Result};

/// Architecture configuration.
///
/// [`ModelConfig::default`] is the desk-scale setting; [`ModelConfig::full`]
/// carries the full-size dimensions (512-d features, 300-d words, 64×64 images).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Object vector / subgraph channel width `D`.
    pub feature_dim: usize,
    /// Episodic memory width.
    pub memory_dim: usize,
    pub embed_dim: usize,
    /// Hidden units per direction of the fact encoder.
    pub fact_hidden: usize,
    pub attention_hidden: usize,
    /// Facts retrieved per object label.
    pub top_k: usize,
    /// Episodic memory passes `T_m`.
    pub memory_passes: usize,
    /// Feature refinement iterations `T_r`.
    pub refine_iters: usize,
    pub num_classes: usize,
    pub num_predicates: usize,
    pub cluster_iou: f64,
    /// Registers the knowledge-refinement parameters.
    pub kb: bool,
    /// Registers the generator/discriminator parameters.
    pub gan: bool,
    pub image: ImageConfig,
}

/// Object-to-image regularizer dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageConfig {
    /// Output side; the generator emits `3 × out × out`.
    pub out_res: usize,
    /// Side of the noise tensor fed to the first refinement module.
    pub start_res: usize,
    pub noise_channels: usize,
    pub gen_channels: usize,
    pub disc_channels: usize,
    /// Width of the object embeddings warped into the layout.
    pub layout_dim: usize,
    /// Weight of the pixel reconstruction term.
    pub lambda_pixel: f64,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            out_res: 16,
            start_res: 4,
            noise_channels: 4,
            gen_channels: 16,
            disc_channels: 8,
            layout_dim: 8,
            lambda_pixel: 1.0,
        }
    }
}

impl ImageConfig {
    pub fn full() -> Self {
        Self {
            out_res: 64,
            start_res: 4,
            noise_channels: 32,
            gen_channels: 64,
            disc_channels: 64,
            layout_dim: 64,
            lambda_pixel: 1.0,
        }
    }

    /// Number of resolution-doubling refinement modules.
    pub fn stages(&self) -> usize {
        (self.out_res / self.start_res).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let ratio = self.out_res / self.start_res.max(1);
        if self.start_res == 0 || self.out_res % self.start_res != 0 || !ratio.is_power_of_two() || ratio < 2 {
            return Err(Error::invalid("image config", "out_res must be start_res times a power of two (≥ 2)"));
        }
        if self.out_res % 16 != 0 {
            return Err(Error::invalid("image config", "out_res must be divisible by 16 (four discriminator halvings)"));
        }
        if self.noise_channels == 0 || self.gen_channels == 0 || self.disc_channels == 0 || self.layout_dim == 0 {
            return Err(Error::invalid("image config", "channel counts must be positive"));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            memory_dim: 32,
            embed_dim: 30,
            fact_hidden: 30,
            attention_hidden: 32,
            top_k: crate::kb::DEFAULT_TOP_K,
            memory_passes: 2,
            refine_iters: 2,
            num_classes: 6,
            num_predicates: 4,
            cluster_iou: crate::proposals::DEFAULT_CLUSTER_IOU,
            kb: true,
            gan: true,
            image: ImageConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        Self {
            feature_dim: 512,
            memory_dim: 512,
            embed_dim: 300,
            fact_hidden: 300,
            attention_hidden: 512,
            num_classes: 100,
            num_predicates: 70,
            image: ImageConfig::full(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.feature_dim,
            self.memory_dim,
            self.embed_dim,
            self.fact_hidden,
            self.attention_hidden,
            self.top_k,
            self.num_classes,
            self.num_predicates,
        ];
        if positive.contains(&0) {
            return Err(Error::invalid("model config", "dimensions must be positive"));
        }
        if self.feature_dim < 2 {
            return Err(Error::invalid("model config", "feature_dim must be at least 2"));
        }
        if self.memory_passes == 0 || self.refine_iters == 0 {
            return Err(Error::invalid("model config", "memory_passes and refine_iters must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.cluster_iou) {
            return Err(Error::invalid("model config", "cluster_iou must lie in [0, 1]"));
        }
        self.image.validate()
    }
}

/// Runtime switches for the two optional branches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Switches {
    pub kb: bool,
    pub gan: bool,
}

impl Switches {
    pub const ALL: Switches = Switches { kb: true, gan: true };
    pub const BASELINE: Switches = Switches { kb: false, gan: false };
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_counts() {
        assert_eq!(ImageConfig::default().stages(), 2);
        assert_eq!(ImageConfig::full().stages(), 4);
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::full().validate().is_ok());
    }

    #[test]
    fn full_scale_dimensions() {
        let p = ModelConfig::full();
        assert_eq!((p.feature_dim, p.memory_dim, p.embed_dim, p.fact_hidden), (512, 512, 300, 300));
        assert_eq!((p.top_k, p.memory_passes, p.refine_iters), (8, 2, 2));
        assert_eq!(p.image.out_res, 64);
        assert_eq!(p.image.lambda_pixel, 1.0);
        assert_eq!(p.cluster_iou, 0.5);
    }

    #[test]
    fn rejects_bad_image_geometry() {
        let mut c = ImageConfig::default();
        c.start_res = 3;
        assert!(c.validate().is_err());
        c.start_res = 16;
        assert!(c.validate().is_err());
    }
}
