use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    #[serde(default)]
    pub drop_path: f32,
}

impl ImageEncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        validate_tower("image", self.width, self.heads, self.mlp_ratio)?;
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(
                "image.patch_size",
                format!("{} does not divide image size {}", self.patch_size, self.image_size),
            ));
        }
        if self.channels == 0 {
            return Err(Error::config("image.channels", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config("image.drop_path", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub context_length: usize,
}

impl TextEncoderConfig {
    /// The end-of-sequence token is the last vocabulary entry.
    pub fn eos_id(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    pub fn validate(&self) -> Result<()> {
        validate_tower("text", self.width, self.heads, self.mlp_ratio)?;
        if self.vocab_size < 2 {
            return Err(Error::config("text.vocab_size", "must be at least 2"));
        }
        if self.context_length == 0 {
            return Err(Error::config("text.context_length", "must be positive"));
        }
        Ok(())
    }
}

fn validate_tower(tower: &str, width: usize, heads: usize, mlp: usize) -> Result<()> {
    if width == 0 || heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::config(
            format!("{tower}.heads"),
            format!("{heads} heads do not divide width {width}"),
        ));
    }
    if mlp == 0 {
        return Err(Error::config(format!("{tower}.mlp_ratio"), "must be positive"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    pub embed_dim: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.text.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        Ok(())
    }

    /// B/16: 12/768/12 image tower, 12/512/8 text tower, CLIP vocabulary.
    pub fn b16() -> Self {
        ModelConfig {
            image: ImageEncoderConfig {
                layers: 12,
                width: 768,
                heads: 12,
                mlp_ratio: 4,
                image_size: 224,
                patch_size: 16,
                channels: 3,
                drop_path: 0.0,
            },
            text: clip_text(12, 512, 8),
            embed_dim: 512,
        }
    }

    /// L/14: 24/1024/16 image tower, 12/768/12 text tower.
    pub fn l14() -> Self {
        ModelConfig {
            image: ImageEncoderConfig {
                layers: 24,
                width: 1024,
                heads: 16,
                mlp_ratio: 4,
                image_size: 224,
                patch_size: 14,
                channels: 3,
                drop_path: 0.0,
            },
            text: clip_text(12, 768, 12),
            embed_dim: 768,
        }
    }

    /// L/14 continued at 336² input.
    pub fn l14_336() -> Self {
        let mut cfg = Self::l14();
        cfg.image.image_size = 336;
        cfg
    }

    /// The B/16 layout cut to 2 layers of width 64 in both towers, with the
    /// byte-level text vocabulary. Desk-scale stand-in for timing and overfit runs.
    pub fn b16_shrunk() -> Self {
        ModelConfig {
            image: ImageEncoderConfig {
                layers: 2,
                width: 64,
                heads: 4,
                mlp_ratio: 4,
                image_size: 224,
                patch_size: 16,
                channels: 3,
                drop_path: 0.0,
            },
            text: TextEncoderConfig {
                layers: 2,
                width: 64,
                heads: 4,
                mlp_ratio: 4,
                vocab_size: crate::data::tokenizer::VOCAB_SIZE,
                context_length: crate::data::tokenizer::DEFAULT_CONTEXT,
            },
            embed_dim: 64,
        }
    }
}

fn clip_text(layers: usize, width: usize, heads: usize) -> TextEncoderConfig {
    TextEncoderConfig {
        layers,
        width,
        heads,
        mlp_ratio: 4,
        vocab_size: 49_408,
        context_length: 77,
    }
}
