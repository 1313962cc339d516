//! Model configuration and its key-value (TOML) file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Partitioning regularizer weights and the dynamic-fraction threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GspConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
}

impl Default for GspConfig {
    fn default() -> Self {
        GspConfig {
            lambda1: 5e-3,
            lambda2: 2e-2,
            tau: 0.25,
        }
    }
}

/// Architecture and loss hyper-parameters. The defaults are the full-scale
/// setting; [`ModelConfig::toy`] is the desk-scale training preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Gaussians per time step.
    pub k: usize,
    /// Latent time steps.
    pub t: usize,
    /// Query width.
    pub d1: usize,
    /// Gaussian-set width inside the fusion blocks.
    pub d2: usize,
    /// Mask-query width.
    pub d3: usize,
    /// Fusion block count.
    pub b: usize,
    /// Final Gaussian dimension (geometry 5 + coefficients d-5).
    pub d: usize,
    /// Codebook length (power of two).
    pub l: usize,
    /// Latent channels entering the fusion blocks.
    pub f: usize,
    /// Encoder output channels.
    pub f_enc: usize,
    pub heads: usize,
    pub points: usize,
    /// Input clip height/width in pixels (latent grid is 4x smaller).
    pub clip_h: usize,
    pub clip_w: usize,
    /// Commitment-loss weight.
    pub alpha: f64,
    /// Adversarial-loss weight; recorded for completeness, no adversarial
    /// term is implemented.
    pub beta: f64,
    /// Apply straight-through geometry bit-quantization during the forward
    /// pass (compression mode). Off by default for training.
    pub geometry_ste: bool,
    pub gsp: GspConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 512,
            t: 5,
            d1: 64,
            d2: 69,
            d3: 64,
            b: 3,
            d: 13,
            l: 4096,
            f: 64,
            f_enc: 64,
            heads: 4,
            points: 4,
            clip_h: 128,
            clip_w: 128,
            alpha: 0.1,
            beta: 0.25,
            geometry_ste: false,
            gsp: GspConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: 9-frame 32x32 clips, 64 Gaussians over 3 steps.
    pub fn toy() -> ModelConfig {
        ModelConfig {
            k: 64,
            t: 3,
            d1: 32,
            d2: 37,
            d3: 32,
            b: 2,
            d: 13,
            l: 512,
            f: 32,
            f_enc: 32,
            heads: 4,
            points: 4,
            clip_h: 32,
            clip_w: 32,
            ..ModelConfig::default()
        }
    }

    pub fn grid_h(&self) -> usize {
        self.clip_h / 4
    }

    pub fn grid_w(&self) -> usize {
        self.clip_w / 4
    }

    /// Spatial latent slots.
    pub fn n(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    /// Coefficient width `d - 5`.
    pub fn coeff_dim(&self) -> usize {
        self.d - 5
    }

    /// Input frame count: frame 1 alone, then groups of 4.
    pub fn frames(&self) -> usize {
        4 * (self.t - 1) + 1
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.d < 6 {
            return fail(format!("d = {} must be >= 6", self.d));
        }
        if self.b < 1 {
            return fail("b must be >= 1".into());
        }
        if self.k < 1 || self.t < 1 {
            return fail(format!("k = {}, t = {} must be >= 1", self.k, self.t));
        }
        if !self.l.is_power_of_two() || self.l < 2 || self.l > u16::MAX as usize {
            return fail(format!("l = {} must be a power of two in [2, 65535]", self.l));
        }
        if self.heads < 1 || self.points < 1 {
            return fail("heads and points must be >= 1".into());
        }
        if self.d1 % self.heads != 0 || self.d3 % self.heads != 0 {
            return fail(format!(
                "d1 = {} and d3 = {} must be divisible by heads = {}",
                self.d1, self.d3, self.heads
            ));
        }
        if self.clip_h % 4 != 0 || self.clip_w % 4 != 0 || self.clip_h == 0 || self.clip_w == 0 {
            return fail(format!(
                "clip {}x{} must be a positive multiple of 4",
                self.clip_h, self.clip_w
            ));
        }
        if !(0.0..=1.0).contains(&self.gsp.tau) {
            return fail(format!("tau = {} must be in [0,1]", self.gsp.tau));
        }
        if self.gsp.lambda1 < 0.0 || self.gsp.lambda2 < 0.0 {
            return fail("lambda1/lambda2 must be non-negative".into());
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelConfig, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ModelConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = toml::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<ModelConfig, ConfigError> {
        let cfg: ModelConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}
