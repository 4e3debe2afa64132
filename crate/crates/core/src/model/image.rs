//! Vision transformer tower with random patch-token masking.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::block::{block, norm};
use super::config::ImageEncoderConfig;
use super::params::{image_param_shapes, BoundParams, ParamTensor};
use super::{EmbeddingOutput, ForwardTrace, Mode};
use crate::error::{Error, Result};
use crate::tensor::{
    add, gather_rows, l2_normalize_rows, matmul, prepend_token, reshape, Tensor,
};

/// Cuts `[b, c, H, W]` images into non-overlapping `p × p` patches in raster
/// order. Each patch vector is laid out channel-major: `(c, y, x)`.
pub fn patchify(images: &Tensor, patch_size: usize) -> Result<Tensor> {
    let sh = images.shape();
    if sh.len() != 4 {
        return Err(Error::dim("patchify", sh, &[patch_size]));
    }
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let p = patch_size;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::dim("patchify", sh, &[patch_size]));
    }
    let (gh, gw) = (h / p, w / p);
    let n = gh * gw;
    let dim = c * p * p;
    let src = images.data();
    let mut out = Vec::with_capacity(b * n * dim);
    for s in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for y in 0..p {
                        let row = ((s * c + ch) * h + py * p + y) * w + px * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(out, &[b, n, dim])
}

/// Random token dropping. `ratio` is the fraction of patch tokens removed; the
/// class token is always kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub ratio: f64,
    pub keep_special: bool,
}

impl MaskSpec {
    pub fn new(ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::Range(format!("mask ratio {ratio} not in [0, 1)")));
        }
        Ok(MaskSpec {
            ratio,
            keep_special: true,
        })
    }

    /// `ceil((1 - ratio) · n)`, at least one.
    pub fn kept(&self, n_tokens: usize) -> usize {
        // the small offset absorbs representation error, e.g. (1 - 0.3) · 10
        let k = ((1.0 - self.ratio) * n_tokens as f64 - 1e-9).ceil() as usize;
        k.clamp(1, n_tokens.max(1))
    }
}

/// Sorted indices of the patch tokens that survive masking, sampled uniformly
/// without replacement. A zero ratio keeps everything and draws nothing from
/// `rng`.
pub fn sample_mask<R: Rng + ?Sized>(n_tokens: usize, spec: &MaskSpec, rng: &mut R) -> Vec<usize> {
    let k = spec.kept(n_tokens);
    if k >= n_tokens {
        return (0..n_tokens).collect();
    }
    let mut idx = rand::seq::index::sample(rng, n_tokens, k).into_vec();
    idx.sort_unstable();
    idx
}

/// Resamples a `(1 + g²) × d` positional table to `(1 + G²) × d`. Row 0 (class
/// token) is copied; the grid is resampled bilinearly with corner-aligned
/// sample points, so linear functions of position are reproduced exactly.
pub fn interpolate_pos_embed(pos: &ParamTensor, new_grid: usize) -> Result<ParamTensor> {
    if pos.shape.len() != 2 || new_grid == 0 {
        return Err(Error::dim("interpolate_pos_embed", &pos.shape, &[new_grid]));
    }
    let (rows, d) = (pos.shape[0], pos.shape[1]);
    let g = (rows.saturating_sub(1) as f64).sqrt().round() as usize;
    if rows < 2 || g * g + 1 != rows {
        return Err(Error::dim("interpolate_pos_embed", &pos.shape, &[new_grid]));
    }
    if g == new_grid {
        return Ok(pos.clone());
    }
    let coord = |i: usize| -> f64 {
        if new_grid == 1 {
            (g - 1) as f64 / 2.0
        } else {
            i as f64 * (g - 1) as f64 / (new_grid - 1) as f64
        }
    };
    let grid = |y: usize, x: usize| &pos.data[(1 + y * g + x) * d..(2 + y * g + x) * d];
    let mut out = Vec::with_capacity((1 + new_grid * new_grid) * d);
    out.extend_from_slice(&pos.data[..d]);
    for oy in 0..new_grid {
        let sy = coord(oy);
        let y0 = (sy.floor() as usize).min(g - 1);
        let y1 = (y0 + 1).min(g - 1);
        let fy = sy - y0 as f64;
        for ox in 0..new_grid {
            let sx = coord(ox);
            let x0 = (sx.floor() as usize).min(g - 1);
            let x1 = (x0 + 1).min(g - 1);
            let fx = sx - x0 as f64;
            let (a, b, c, e) = (grid(y0, x0), grid(y0, x1), grid(y1, x0), grid(y1, x1));
            for j in 0..d {
                let top = f64::from(a[j]) * (1.0 - fx) + f64::from(b[j]) * fx;
                let bot = f64::from(c[j]) * (1.0 - fx) + f64::from(e[j]) * fx;
                out.push((top * (1.0 - fy) + bot * fy) as f32);
            }
        }
    }
    ParamTensor::new(vec![1 + new_grid * new_grid, d], out)
}

/// Image tower forward pass.
///
/// patch embed → add positional rows → (keep sampled tokens) → prepend class
/// token → blocks → final norm on the class token → projection → L2 normalize.
/// Raw patches are gathered before the (per-token linear) patch embedding, so
/// masked tokens cost nothing; each kept token still receives the positional
/// row of its original grid position.
#[allow(clippy::too_many_arguments)]
pub fn encode_image<R: Rng + ?Sized>(
    images: &Tensor,
    cfg: &ImageEncoderConfig,
    embed_dim: usize,
    params: &BoundParams,
    mode: Mode,
    mask: Option<&MaskSpec>,
    rng: &mut R,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<EmbeddingOutput> {
    cfg.validate()?;
    params.check(&image_param_shapes(cfg, embed_dim))?;
    if mode == Mode::Eval && mask.is_some() {
        return Err(Error::contract("encode_image", "masking is only allowed in training mode"));
    }
    let sh = images.shape();
    if sh.len() != 4 || sh[1] != cfg.channels || sh[2] != cfg.image_size || sh[3] != cfg.image_size
    {
        return Err(Error::dim(
            "encode_image",
            sh,
            &[cfg.channels, cfg.image_size, cfg.image_size],
        ));
    }
    let b = sh[0];
    let n = cfg.num_patches();
    let d = cfg.width;

    let patches = patchify(images, cfg.patch_size)?;
    let patches = reshape(&patches, &[b * n, cfg.patch_dim()])?;
    let kept: Vec<Vec<usize>> = (0..b)
        .map(|_| match mask {
            Some(spec) => sample_mask(n, spec, rng),
            None => (0..n).collect(),
        })
        .collect();
    let k = kept[0].len();
    let token_rows: Vec<usize> = kept
        .iter()
        .enumerate()
        .flat_map(|(s, idx)| idx.iter().map(move |&i| s * n + i))
        .collect();
    let pos_rows: Vec<usize> = kept.iter().flatten().map(|&i| 1 + i).collect();

    let pos = params.get("visual.pos_embed")?;
    let x = gather_rows(&patches, &token_rows)?;
    let x = super::block::linear(&x, params, "visual.patch_embed")?;
    let x = add(&x, &gather_rows(pos, &pos_rows)?)?;
    let x = reshape(&x, &[b, k, d])?;
    let cls = add(
        params.get("visual.class_token")?,
        &reshape(&gather_rows(pos, &[0])?, &[d])?,
    )?;
    let mut x = prepend_token(&x, &cls)?;

    let drop = if mode == Mode::Train { cfg.drop_path } else { 0.0 };
    for i in 0..cfg.layers {
        x = block(&x, params, &format!("visual.blocks.{i}"), cfg.heads, false, drop, rng, &mut trace)?;
    }
    if let Some(t) = trace {
        t.kept = kept;
        t.tokens_per_image = k + 1;
    }

    let flat = reshape(&x, &[b * (k + 1), d])?;
    let cls_rows: Vec<usize> = (0..b).map(|s| s * (k + 1)).collect();
    let pooled = norm(&gather_rows(&flat, &cls_rows)?, params, "visual.ln_post")?;
    let projected = matmul(&pooled, params.get("visual.proj")?)?;
    Ok(EmbeddingOutput::normalized(l2_normalize_rows(&projected)))
}
