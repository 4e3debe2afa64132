#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use clipforge_core::loss::{clip_loss, similarity_logits, MAX_LOG_SCALE};
use clipforge_core::model::EmbeddingOutput;
use clipforge_core::tensor::*;
use clipforge_core::Result;

/// Central-difference step used by every gradient check.
pub const GRAD_EPS: f32 = 2e-3;

pub type ScalarFn = Box<dyn Fn(&Tensor) -> Result<Tensor>>;

/// A scalar function of one input tensor and the point to check it at.
pub struct GradCase {
    pub name: &'static str,
    pub x: Vec<f32>,
    pub shape: Vec<usize>,
    pub f: ScalarFn,
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn constant(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(randn(rng, shape.iter().product()), shape).unwrap()
}

/// Contracts `y` with a fixed pseudo-random weight so every output element
/// contributes to the checked scalar.
fn weigh(y: Tensor, salt: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(salt);
    let w = Tensor::new(randn(&mut rng, y.len()), y.shape())?;
    Ok(sum(&mul(&y, &w)?))
}

fn case(name: &'static str, x: Vec<f32>, shape: &[usize], f: impl Fn(&Tensor) -> Result<Tensor> + 'static) -> GradCase {
    GradCase {
        name,
        x,
        shape: shape.to_vec(),
        f: Box::new(f),
    }
}

fn pair_loss(img: &Tensor, txt: &Tensor, log_scale: &Tensor) -> Result<Tensor> {
    let i = EmbeddingOutput::normalized(l2_normalize_rows(img));
    let t = EmbeddingOutput::normalized(l2_normalize_rows(txt));
    clip_loss(&similarity_logits(&i, &t, log_scale, MAX_LOG_SCALE)?)
}

/// One case per differentiable op and input, plus the 4-pair contrastive loss
/// with respect to image embeddings, text embeddings and the logit scale.
pub fn grad_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = seed.wrapping_mul(31);
    let mut v = Vec::new();

    let b45 = constant(&mut rng, &[4, 5]);
    v.push(case("matmul/lhs", randn(&mut rng, 12), &[3, 4], move |x| weigh(matmul(x, &b45)?, s)));
    let a34 = constant(&mut rng, &[3, 4]);
    v.push(case("matmul/rhs", randn(&mut rng, 20), &[4, 5], move |x| weigh(matmul(&a34, x)?, s)));
    let b245 = constant(&mut rng, &[2, 4, 5]);
    v.push(case("bmm/lhs", randn(&mut rng, 24), &[2, 3, 4], move |x| weigh(bmm(x, &b245, false)?, s)));
    let a234 = constant(&mut rng, &[2, 3, 4]);
    v.push(case("bmm/rhs-transposed", randn(&mut rng, 40), &[2, 5, 4], move |x| {
        weigh(bmm(&a234, x, true)?, s)
    }));
    let c = constant(&mut rng, &[3, 4]);
    v.push(case("add", randn(&mut rng, 12), &[3, 4], move |x| weigh(add(x, &c)?, s)));
    let c = constant(&mut rng, &[3, 4]);
    v.push(case("mul", randn(&mut rng, 12), &[3, 4], move |x| weigh(mul(x, &c)?, s)));
    let bias = constant(&mut rng, &[4]);
    v.push(case("add_broadcast/lhs", randn(&mut rng, 24), &[2, 3, 4], move |x| {
        weigh(add_broadcast(x, &bias)?, s)
    }));
    let a = constant(&mut rng, &[2, 3, 4]);
    v.push(case("add_broadcast/rhs", randn(&mut rng, 4), &[4], move |x| weigh(add_broadcast(&a, x)?, s)));
    v.push(case("scale", randn(&mut rng, 12), &[3, 4], move |x| weigh(scale(x, 1.7), s)));
    let k = constant(&mut rng, &[1]);
    v.push(case("mul_scalar/lhs", randn(&mut rng, 12), &[3, 4], move |x| weigh(mul_scalar(x, &k)?, s)));
    let a = constant(&mut rng, &[3, 4]);
    v.push(case("mul_scalar/rhs", randn(&mut rng, 1), &[1], move |x| weigh(mul_scalar(&a, x)?, s)));
    v.push(case("exp", randn(&mut rng, 12), &[3, 4], move |x| weigh(exp(x), s)));
    // keep points away from the kink
    let xs: Vec<f32> = randn(&mut rng, 12)
        .into_iter()
        .map(|x| if (x - 0.3).abs() < 0.05 { x + 0.2 } else { x })
        .collect();
    v.push(case("clamp_max", xs, &[3, 4], move |x| weigh(clamp_max(x, 0.3), s)));
    v.push(case("gelu", randn(&mut rng, 12), &[3, 4], move |x| weigh(gelu(x), s)));
    v.push(case("sum", randn(&mut rng, 12), &[3, 4], move |x| weigh(sum(x), s)));
    v.push(case("mean", randn(&mut rng, 12), &[3, 4], move |x| weigh(mean(x), s)));
    let (g, b) = (constant(&mut rng, &[6]), constant(&mut rng, &[6]));
    v.push(case("layer_norm/x", randn(&mut rng, 18), &[3, 6], move |x| {
        weigh(layer_norm(x, &g, &b, 1e-5)?, s)
    }));
    let (xn, b) = (constant(&mut rng, &[3, 6]), constant(&mut rng, &[6]));
    v.push(case("layer_norm/gain", randn(&mut rng, 6), &[6], move |x| {
        weigh(layer_norm(&xn, x, &b, 1e-5)?, s)
    }));
    let (xn, g) = (constant(&mut rng, &[3, 6]), constant(&mut rng, &[6]));
    v.push(case("layer_norm/bias", randn(&mut rng, 6), &[6], move |x| {
        weigh(layer_norm(&xn, &g, x, 1e-5)?, s)
    }));
    v.push(case("l2_normalize_rows", randn(&mut rng, 15), &[3, 5], move |x| {
        weigh(l2_normalize_rows(x), s)
    }));
    v.push(case("softmax_rows", randn(&mut rng, 15), &[3, 5], move |x| weigh(softmax_rows(x), s)));
    v.push(case("causal_softmax", randn(&mut rng, 32), &[2, 4, 4], move |x| {
        weigh(causal_softmax(x)?, s)
    }));
    let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    v.push(case("cross_entropy_rows", randn(&mut rng, 20), &[4, 5], move |x| {
        cross_entropy_rows(x, &targets)
    }));
    v.push(case("reshape", randn(&mut rng, 12), &[2, 6], move |x| weigh(reshape(x, &[3, 4])?, s)));
    v.push(case("permute", randn(&mut rng, 24), &[2, 3, 4], move |x| {
        weigh(permute(x, &[2, 0, 1])?, s)
    }));
    v.push(case("transpose", randn(&mut rng, 15), &[3, 5], move |x| weigh(transpose(x)?, s)));
    v.push(case("gather_rows", randn(&mut rng, 12), &[4, 3], move |x| {
        weigh(gather_rows(x, &[2, 0, 2, 3])?, s)
    }));
    let tok = constant(&mut rng, &[4]);
    v.push(case("prepend_token/x", randn(&mut rng, 24), &[2, 3, 4], move |x| {
        weigh(prepend_token(x, &tok)?, s)
    }));
    let seq = constant(&mut rng, &[2, 3, 4]);
    v.push(case("prepend_token/token", randn(&mut rng, 4), &[4], move |x| {
        weigh(prepend_token(&seq, x)?, s)
    }));
    v.push(case("drop_path", randn(&mut rng, 24), &[6, 4], move |x| {
        weigh(drop_path(x, 0.5, &mut ChaCha8Rng::seed_from_u64(s))?, s)
    }));

    let init_scale = Tensor::new(vec![(1.0f32 / 0.07).ln()], &[1]).unwrap();
    let txt = constant(&mut rng, &[4, 8]);
    let ls = init_scale.clone();
    v.push(case("clip_loss/image", randn(&mut rng, 32), &[4, 8], move |x| pair_loss(x, &txt, &ls)));
    let img = constant(&mut rng, &[4, 8]);
    let ls = init_scale;
    v.push(case("clip_loss/text", randn(&mut rng, 32), &[4, 8], move |x| pair_loss(&img, x, &ls)));
    let (img, txt) = (constant(&mut rng, &[4, 8]), constant(&mut rng, &[4, 8]));
    v.push(case("clip_loss/logit_scale", vec![rng.random_range(1.0..4.0)], &[1], move |x| {
        pair_loss(&img, &txt, x)
    }));
    v
}

/// Worst relative error of each case at `seed`.
pub fn grad_errors(seed: u64) -> Vec<(&'static str, f64)> {
    grad_cases(seed)
        .into_iter()
        .map(|c| {
            let r = grad_check(&c.f, &c.x, &c.shape, GRAD_EPS).unwrap();
            (c.name, r.max_rel_error)
        })
        .collect()
}
