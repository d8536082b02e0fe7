use serde::{Deserialize, Serialize};

use super::EncoderError;

/// Longest text context the encoders accept.
pub const MAX_CONTEXT_LENGTH: usize = 76;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            width: 64,
            depth: 2,
            heads: 4,
            embed_dim: 32,
        }
    }
}

impl VitConfig {
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |msg: String| Err(EncoderError::Config(format!("vit: {msg}")));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.depth == 0 || self.channels == 0 || self.embed_dim == 0 {
            return bad("depth, channels and embed_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Output channels per stage.
    pub stage_channels: Vec<usize>,
    /// Odd kernel size per stage.
    pub kernel_sizes: Vec<usize>,
    /// Whether each stage ends with 2×2 average pooling.
    pub pool: Vec<bool>,
    pub embed_dim: usize,
}

impl Default for ConvConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            stage_channels: vec![16, 32, 64],
            kernel_sizes: vec![3, 3, 3],
            pool: vec![true, true, false],
            embed_dim: 32,
        }
    }
}

impl ConvConfig {
    /// Side length of the final feature grid.
    pub fn grid_size(&self) -> usize {
        self.pool
            .iter()
            .fold(self.image_size, |s, &p| if p { s / 2 } else { s })
    }

    pub fn width(&self) -> usize {
        *self.stage_channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |msg: String| Err(EncoderError::Config(format!("conv: {msg}")));
        let n = self.stage_channels.len();
        if n == 0 || self.kernel_sizes.len() != n || self.pool.len() != n {
            return bad("stage_channels, kernel_sizes and pool must be non-empty and equally long".into());
        }
        if self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            return bad(format!("kernel sizes must be odd: {:?}", self.kernel_sizes));
        }
        let mut side = self.image_size;
        for &p in &self.pool {
            if p {
                if !side.is_multiple_of(2) {
                    return bad(format!("cannot pool odd grid side {side}"));
                }
                side /= 2;
            }
        }
        if side < 2 {
            return bad(format!("final grid {side}x{side} is smaller than 2x2"));
        }
        if self.stage_channels.contains(&0) || self.channels == 0 || self.embed_dim == 0 {
            return bad("channel counts and embed_dim must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ImageConfig {
    Vit(VitConfig),
    Conv(ConvConfig),
}

impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig::Vit(VitConfig::default())
    }
}

impl ImageConfig {
    pub fn image_size(&self) -> usize {
        match self {
            ImageConfig::Vit(c) => c.image_size,
            ImageConfig::Conv(c) => c.image_size,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            ImageConfig::Vit(c) => c.channels,
            ImageConfig::Conv(c) => c.channels,
        }
    }

    pub fn embed_dim(&self) -> usize {
        match self {
            ImageConfig::Vit(c) => c.embed_dim,
            ImageConfig::Conv(c) => c.embed_dim,
        }
    }

    /// Width of the hidden features feeding the projection heads.
    pub fn width(&self) -> usize {
        match self {
            ImageConfig::Vit(c) => c.width,
            ImageConfig::Conv(c) => c.width(),
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        match self {
            ImageConfig::Vit(c) => c.validate(),
            ImageConfig::Conv(c) => c.validate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            context_length: 16,
            width: 64,
            depth: 2,
            heads: 4,
            embed_dim: 32,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |msg: String| Err(EncoderError::Config(format!("text: {msg}")));
        if self.context_length < 2 || self.context_length > MAX_CONTEXT_LENGTH {
            return bad(format!(
                "context_length {} outside [2, {MAX_CONTEXT_LENGTH}]",
                self.context_length
            ));
        }
        if self.depth == 0 {
            return bad("depth must be at least 1".into());
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.vocab_size <= crate::data::RESERVED_TOKENS || self.embed_dim == 0 {
            return bad(format!(
                "vocab_size must exceed the {} reserved ids and embed_dim must be positive",
                crate::data::RESERVED_TOKENS
            ));
        }
        Ok(())
    }

    /// Scalar parameter count of the text tower (embeddings, blocks, final
    /// norm and projection), from the configuration alone.
    pub fn parameter_count(&self) -> usize {
        let (d, v, l, e) = (self.width, self.vocab_size, self.context_length, self.embed_dim);
        v * d + l * d + self.depth * super::layers::block_parameter_count(d) + 2 * d + d * e
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image: ImageConfig,
    pub text: TextConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        self.image.validate()?;
        self.text.validate()?;
        if self.image.embed_dim() != self.text.embed_dim {
            return Err(EncoderError::Config(format!(
                "image embed_dim {} differs from text embed_dim {}",
                self.image.embed_dim(),
                self.text.embed_dim
            )));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.text.embed_dim
    }
}
