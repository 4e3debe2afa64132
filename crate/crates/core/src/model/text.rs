//! Causal transformer text tower pooled at the end-of-sequence token.

use rand::Rng;

use super::block::{block, norm};
use super::config::TextEncoderConfig;
use super::params::{text_param_shapes, BoundParams};
use super::{EmbeddingOutput, ForwardTrace};
use crate::error::{Error, Result};
use crate::tensor::{add_broadcast, gather_rows, l2_normalize_rows, matmul, reshape};

/// Encodes `batch` rows of token ids, each of the same length `L <=
/// context_length`. Every row must contain exactly one end-of-sequence token;
/// tokens after it cannot influence the pooled feature.
pub fn encode_text<R: Rng + ?Sized>(
    token_ids: &[u32],
    batch: usize,
    cfg: &TextEncoderConfig,
    embed_dim: usize,
    params: &BoundParams,
    rng: &mut R,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<EmbeddingOutput> {
    cfg.validate()?;
    params.check(&text_param_shapes(cfg, embed_dim))?;
    if batch == 0 || token_ids.is_empty() || !token_ids.len().is_multiple_of(batch) {
        return Err(Error::dim("encode_text", &[token_ids.len()], &[batch]));
    }
    let len = token_ids.len() / batch;
    if len > cfg.context_length {
        return Err(Error::Input(format!(
            "sequence length {len} exceeds context length {}",
            cfg.context_length
        )));
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!("token id {bad} >= vocab size {}", cfg.vocab_size)));
    }
    let eos = cfg.eos_id();
    let mut eos_rows = Vec::with_capacity(batch);
    for (r, row) in token_ids.chunks(len).enumerate() {
        let mut hits = row.iter().enumerate().filter(|(_, &t)| t == eos);
        match (hits.next(), hits.next()) {
            (Some((pos, _)), None) => eos_rows.push(r * len + pos),
            (None, _) => {
                return Err(Error::Input(format!("row {r} has no end-of-sequence token")))
            }
            (Some(_), Some(_)) => {
                return Err(Error::Input(format!(
                    "row {r} has more than one end-of-sequence token"
                )))
            }
        }
    }

    let d = cfg.width;
    let ids: Vec<usize> = token_ids.iter().map(|&t| t as usize).collect();
    let x = gather_rows(params.get("text.token_embed")?, &ids)?;
    let x = reshape(&x, &[batch, len, d])?;
    let positions: Vec<usize> = (0..len).collect();
    let mut x = add_broadcast(&x, &gather_rows(params.get("text.pos_embed")?, &positions)?)?;
    for i in 0..cfg.layers {
        x = block(&x, params, &format!("text.blocks.{i}"), cfg.heads, true, 0.0, rng, &mut trace)?;
    }
    let flat = reshape(&x, &[batch * len, d])?;
    let pooled = norm(&gather_rows(&flat, &eos_rows)?, params, "text.ln_final")?;
    let projected = matmul(&pooled, params.get("text.proj")?)?;
    Ok(EmbeddingOutput::normalized(l2_normalize_rows(&projected)))
}
