//! Image and text towers, parameter layout and counting.

mod block;
pub mod config;
pub mod image;
pub mod params;
pub mod text;

use rand::Rng;
use serde::Serialize;

pub use config::{ImageEncoderConfig, ModelConfig, TextEncoderConfig};
pub use image::{encode_image, interpolate_pos_embed, patchify, sample_mask, MaskSpec};
pub use params::{
    image_param_shapes, is_decay_exempt, model_param_shapes, text_param_shapes, BoundParams,
    ParamStore, ParamTensor, IMAGE_PREFIX, INIT_LOG_SCALE, LOGIT_SCALE, TEXT_PREFIX,
};
pub use text::encode_text;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Training mode samples masks and drop-path; evaluation is deterministic and
/// mask-free.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Encoder output rows, optionally L2-normalized.
#[derive(Debug, Clone)]
pub struct EmbeddingOutput {
    pub vector: Tensor,
    pub normalized: bool,
}

impl EmbeddingOutput {
    pub fn normalized(vector: Tensor) -> Self {
        EmbeddingOutput {
            vector,
            normalized: true,
        }
    }

    pub fn raw(vector: Tensor) -> Self {
        EmbeddingOutput {
            vector,
            normalized: false,
        }
    }

    pub fn batch(&self) -> usize {
        self.vector.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vector.shape()[1]
    }

    /// Rows as owned vectors.
    pub fn rows(&self) -> Vec<Vec<f32>> {
        self.vector.data().chunks(self.dim()).map(<[f32]>::to_vec).collect()
    }

    /// Confirms the flag and that every row has unit norm within `tol`.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        if !self.normalized {
            return Err(Error::contract("embedding", "embeddings are not normalized"));
        }
        for (i, row) in self.vector.data().chunks(self.dim()).enumerate() {
            let n = row.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            if (n - 1.0).abs() > tol {
                return Err(Error::contract(
                    "embedding",
                    format!("row {i} has norm {n}, expected 1"),
                ));
            }
        }
        Ok(())
    }
}

/// Shapes observed during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// `[b, heads, n, n]` per attention layer.
    pub attention_shapes: Vec<Vec<usize>>,
    /// Kept patch indices per image (image tower only).
    pub kept: Vec<Vec<usize>>,
    /// Token positions per image including the class token.
    pub tokens_per_image: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub image: usize,
    pub text: usize,
    pub logit_scale: usize,
    pub total: usize,
}

/// Exact trainable-parameter count of both towers plus the logit scale.
pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let sum = |shapes: Vec<(String, Vec<usize>)>| -> usize {
        shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    };
    let image = sum(image_param_shapes(&cfg.image, cfg.embed_dim));
    let text = sum(text_param_shapes(&cfg.text, cfg.embed_dim));
    ParamCount {
        image,
        text,
        logit_scale: 1,
        total: image + text + 1,
    }
}

/// Parameters together with the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl ClipModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParamStore::init(&config, seed)?;
        Ok(ClipModel { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        params.validate(&config)?;
        Ok(ClipModel { config, params })
    }

    /// Evaluation-mode image embeddings (no graph, no masking).
    pub fn embed_images(&self, images: &Tensor) -> Result<EmbeddingOutput> {
        let bound = self.params.bind(false);
        let mut rng = unused_rng();
        encode_image(
            images,
            &self.config.image,
            self.config.embed_dim,
            &bound,
            Mode::Eval,
            None,
            &mut rng,
            None,
        )
    }

    /// Evaluation-mode text embeddings.
    pub fn embed_texts(&self, token_ids: &[u32], batch: usize) -> Result<EmbeddingOutput> {
        let bound = self.params.bind(false);
        let mut rng = unused_rng();
        encode_text(
            token_ids,
            batch,
            &self.config.text,
            self.config.embed_dim,
            &bound,
            &mut rng,
            None,
        )
    }
}

/// Generator handed to evaluation-mode passes, which never draw from it.
pub(crate) fn unused_rng() -> impl Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(0)
}
