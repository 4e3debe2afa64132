//! Pre-norm transformer block shared by both towers.

use rand::Rng;

use super::params::BoundParams;
use super::ForwardTrace;
use crate::error::Result;
use crate::tensor::{
    add, add_broadcast, bmm, causal_softmax, drop_path, gelu, layer_norm, matmul, permute, reshape,
    scale, softmax_rows, Tensor,
};

pub const LN_EPS: f32 = 1e-5;

pub(crate) fn linear(x: &Tensor, p: &BoundParams, prefix: &str) -> Result<Tensor> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    add_broadcast(&matmul(x, w)?, b)
}

pub(crate) fn norm(x: &Tensor, p: &BoundParams, prefix: &str) -> Result<Tensor> {
    layer_norm(
        x,
        p.get(&format!("{prefix}.gain"))?,
        p.get(&format!("{prefix}.bias"))?,
        LN_EPS,
    )
}

/// `[b, n, d] → [b, heads, n, d/heads]`
fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    permute(&reshape(x, &[b, n, heads, d / heads])?, &[0, 2, 1, 3])
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, n, dh) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    reshape(&permute(x, &[0, 2, 1, 3])?, &[b, n, h * dh])
}

fn attention(
    x: &Tensor,
    p: &BoundParams,
    prefix: &str,
    heads: usize,
    causal: bool,
    trace: &mut Option<&mut ForwardTrace>,
) -> Result<Tensor> {
    let d = x.shape()[2];
    let q = split_heads(&linear(x, p, &format!("{prefix}.q"))?, heads)?;
    let k = split_heads(&linear(x, p, &format!("{prefix}.k"))?, heads)?;
    let v = split_heads(&linear(x, p, &format!("{prefix}.v"))?, heads)?;
    let scores = scale(&bmm(&q, &k, true)?, 1.0 / ((d / heads) as f32).sqrt());
    if let Some(t) = trace.as_deref_mut() {
        t.attention_shapes.push(scores.shape().to_vec());
    }
    let weights = if causal {
        causal_softmax(&scores)?
    } else {
        softmax_rows(&scores)
    };
    let ctx = merge_heads(&bmm(&weights, &v, false)?)?;
    linear(&ctx, p, &format!("{prefix}.out"))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn block<R: Rng + ?Sized>(
    x: &Tensor,
    p: &BoundParams,
    prefix: &str,
    heads: usize,
    causal: bool,
    drop_rate: f32,
    rng: &mut R,
    trace: &mut Option<&mut ForwardTrace>,
) -> Result<Tensor> {
    let h = norm(x, p, &format!("{prefix}.ln1"))?;
    let a = attention(&h, p, &format!("{prefix}.attn"), heads, causal, trace)?;
    let x = add(x, &drop_path(&a, drop_rate, rng)?)?;
    let h = norm(&x, p, &format!("{prefix}.ln2"))?;
    let m = gelu(&linear(&h, p, &format!("{prefix}.mlp.fc1"))?);
    let m = linear(&m, p, &format!("{prefix}.mlp.fc2"))?;
    add(&x, &drop_path(&m, drop_rate, rng)?)
}
