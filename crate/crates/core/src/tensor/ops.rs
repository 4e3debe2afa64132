use rand::Rng;

use super::gemm::{gemm, widen, MatRef};
use super::{numel, Tensor};
use crate::error::{Error, Result};

fn narrow(x: Vec<f64>) -> Vec<f32> {
    x.into_iter().map(|v| v as f32).collect()
}

fn need(inputs: &[Tensor], i: usize) -> bool {
    inputs[i].requires_grad()
}

/// Splits `shape` into (rows, last extent).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("tensors have rank >= 1");
    (numel(shape) / cols, cols)
}

// ---------------------------------------------------------------------------
// products

/// `a[..., k] · b[k, n] → [..., n]`. Leading extents of `a` are treated as rows.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
        return Err(Error::dim("matmul", ash, bsh));
    }
    let (m, k) = rows_cols(ash);
    let n = bsh[1];
    let (aw, bw) = (widen(a.data()), widen(b.data()));
    let mut out = vec![0.0; m * n];
    gemm(MatRef::row_major(&aw, m, k), MatRef::row_major(&bw, k, n), &mut out);
    let mut shape = ash.to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_op(
        narrow(out),
        shape,
        "matmul",
        vec![a.clone(), b.clone()],
        Box::new(move |g, _, inputs| {
            let gw = widen(g);
            let da = need(inputs, 0).then(|| {
                let bw = widen(inputs[1].data());
                let mut da = vec![0.0; m * k];
                gemm(MatRef::row_major(&gw, m, n), MatRef::transposed(&bw, k, n), &mut da);
                narrow(da)
            });
            let db = need(inputs, 1).then(|| {
                let aw = widen(inputs[0].data());
                let mut db = vec![0.0; k * n];
                gemm(MatRef::transposed(&aw, m, k), MatRef::row_major(&gw, m, n), &mut db);
                narrow(db)
            });
            vec![da, db]
        }),
    ))
}

/// Batched product over matching leading extents:
/// `a[..., m, k] · b[..., k, n]`, or `a · bᵀ` with `b[..., n, k]` when
/// `transpose_b` is set.
pub fn bmm(a: &Tensor, b: &Tensor, transpose_b: bool) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    let r = ash.len();
    if r < 3 || bsh.len() != r || ash[..r - 2] != bsh[..r - 2] {
        return Err(Error::dim("bmm", ash, bsh));
    }
    let (m, k) = (ash[r - 2], ash[r - 1]);
    let (bk, n) = if transpose_b {
        (bsh[r - 1], bsh[r - 2])
    } else {
        (bsh[r - 2], bsh[r - 1])
    };
    if bk != k {
        return Err(Error::dim("bmm", ash, bsh));
    }
    let batch = numel(&ash[..r - 2]);
    let (aw, bw) = (widen(a.data()), widen(b.data()));
    let mut out = vec![0.0; batch * m * n];
    for i in 0..batch {
        let ab = &aw[i * m * k..(i + 1) * m * k];
        let bb = &bw[i * k * n..(i + 1) * k * n];
        let bv = if transpose_b {
            MatRef::transposed(bb, n, k)
        } else {
            MatRef::row_major(bb, k, n)
        };
        gemm(MatRef::row_major(ab, m, k), bv, &mut out[i * m * n..(i + 1) * m * n]);
    }
    let mut shape = ash.to_vec();
    shape[r - 1] = n;
    Ok(Tensor::from_op(
        narrow(out),
        shape,
        "bmm",
        vec![a.clone(), b.clone()],
        Box::new(move |g, _, inputs| {
            let gw = widen(g);
            let da = need(inputs, 0).then(|| {
                let bw = widen(inputs[1].data());
                let mut da = vec![0.0; batch * m * k];
                for i in 0..batch {
                    let gb = MatRef::row_major(&gw[i * m * n..(i + 1) * m * n], m, n);
                    let bb = &bw[i * k * n..(i + 1) * k * n];
                    // C = A·B → dA = dC·Bᵀ ; C = A·Bᵀ → dA = dC·B
                    let bv = if transpose_b {
                        MatRef::row_major(bb, n, k)
                    } else {
                        MatRef::transposed(bb, k, n)
                    };
                    gemm(gb, bv, &mut da[i * m * k..(i + 1) * m * k]);
                }
                narrow(da)
            });
            let db = need(inputs, 1).then(|| {
                let aw = widen(inputs[0].data());
                let mut db = vec![0.0; batch * k * n];
                for i in 0..batch {
                    let gs = &gw[i * m * n..(i + 1) * m * n];
                    let ab = &aw[i * m * k..(i + 1) * m * k];
                    let out = &mut db[i * k * n..(i + 1) * k * n];
                    if transpose_b {
                        // dB[n×k] = dCᵀ · A
                        gemm(MatRef::transposed(gs, m, n), MatRef::row_major(ab, m, k), out);
                    } else {
                        // dB[k×n] = Aᵀ · dC
                        gemm(MatRef::transposed(ab, m, k), MatRef::row_major(gs, m, n), out);
                    }
                }
                narrow(db)
            });
            vec![da, db]
        }),
    ))
}

// ---------------------------------------------------------------------------
// elementwise

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        "add",
        vec![a.clone(), b.clone()],
        Box::new(|g, _, inputs| {
            vec![
                need(inputs, 0).then(|| g.to_vec()),
                need(inputs, 1).then(|| g.to_vec()),
            ]
        }),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        "mul",
        vec![a.clone(), b.clone()],
        Box::new(|g, _, inputs| {
            let prod = |other: &Tensor| g.iter().zip(other.data()).map(|(g, o)| g * o).collect();
            vec![
                need(inputs, 0).then(|| prod(&inputs[1])),
                need(inputs, 1).then(|| prod(&inputs[0])),
            ]
        }),
    ))
}

/// `a + b` where `b`'s shape is a suffix of `a`'s (bias rows, positional tables).
pub fn add_broadcast(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ash, bsh) = (a.shape(), b.shape());
    if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != *bsh {
        return Err(Error::dim("add_broadcast", ash, bsh));
    }
    let period = b.len();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x + b.data()[i % period])
        .collect();
    Ok(Tensor::from_op(
        data,
        ash.to_vec(),
        "add_broadcast",
        vec![a.clone(), b.clone()],
        Box::new(move |g, _, inputs| {
            let db = need(inputs, 1).then(|| {
                let mut acc = vec![0.0f64; period];
                for chunk in g.chunks(period) {
                    acc.iter_mut().zip(chunk).for_each(|(a, &v)| *a += f64::from(v));
                }
                narrow(acc)
            });
            vec![need(inputs, 0).then(|| g.to_vec()), db]
        }),
    ))
}

/// Multiplies by a constant.
pub fn scale(a: &Tensor, c: f32) -> Tensor {
    let data = a.data().iter().map(|x| x * c).collect();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        "scale",
        vec![a.clone()],
        Box::new(move |g, _, _| vec![Some(g.iter().map(|v| v * c).collect())]),
    )
}

/// Multiplies every element by a (differentiable) single-element tensor.
pub fn mul_scalar(a: &Tensor, s: &Tensor) -> Result<Tensor> {
    if s.len() != 1 {
        return Err(Error::dim("mul_scalar", a.shape(), s.shape()));
    }
    let c = s.data()[0];
    let data = a.data().iter().map(|x| x * c).collect();
    Ok(Tensor::from_op(
        data,
        a.shape().to_vec(),
        "mul_scalar",
        vec![a.clone(), s.clone()],
        Box::new(|g, _, inputs| {
            let c = inputs[1].data()[0];
            let da = need(inputs, 0).then(|| g.iter().map(|v| v * c).collect());
            let ds = need(inputs, 1).then(|| {
                let dot: f64 = g
                    .iter()
                    .zip(inputs[0].data())
                    .map(|(&g, &x)| f64::from(g) * f64::from(x))
                    .sum();
                vec![dot as f32]
            });
            vec![da, ds]
        }),
    ))
}

pub fn exp(a: &Tensor) -> Tensor {
    let data = a.data().iter().map(|x| x.exp()).collect();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        "exp",
        vec![a.clone()],
        Box::new(|g, y, _| vec![Some(g.iter().zip(y).map(|(g, y)| g * y).collect())]),
    )
}

/// `min(x, c)`; the gradient passes where `x <= c`.
pub fn clamp_max(a: &Tensor, c: f32) -> Tensor {
    let data = a.data().iter().map(|&x| x.min(c)).collect();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        "clamp_max",
        vec![a.clone()],
        Box::new(move |g, _, inputs| {
            vec![Some(
                g.iter()
                    .zip(inputs[0].data())
                    .map(|(&g, &x)| if x <= c { g } else { 0.0 })
                    .collect(),
            )]
        }),
    )
}

const GELU_K: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_C: f32 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu(a: &Tensor) -> Tensor {
    let data = a
        .data()
        .iter()
        .map(|&x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()))
        .collect();
    Tensor::from_op(
        data,
        a.shape().to_vec(),
        "gelu",
        vec![a.clone()],
        Box::new(|g, _, inputs| {
            let dx = g
                .iter()
                .zip(inputs[0].data())
                .map(|(&g, &x)| {
                    let inner = GELU_K * (x + GELU_C * x * x * x);
                    let t = inner.tanh();
                    let dinner = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                    g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)
                })
                .collect();
            vec![Some(dx)]
        }),
    )
}

// ---------------------------------------------------------------------------
// reductions

pub fn sum(a: &Tensor) -> Tensor {
    let total: f64 = a.data().iter().map(|&v| f64::from(v)).sum();
    let n = a.len();
    Tensor::from_op(
        vec![total as f32],
        vec![1],
        "sum",
        vec![a.clone()],
        Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean(a: &Tensor) -> Tensor {
    let n = a.len();
    let total: f64 = a.data().iter().map(|&v| f64::from(v)).sum();
    Tensor::from_op(
        vec![(total / n as f64) as f32],
        vec![1],
        "mean",
        vec![a.clone()],
        Box::new(move |g, _, _| vec![Some(vec![g[0] / n as f32; n])]),
    )
}

// ---------------------------------------------------------------------------
// normalization

/// Per-row standardization over the last axis (population variance) followed
/// by the affine `gain`/`bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let (rows, d) = rows_cols(x.shape());
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    if !(eps >= 0.0) {
        return Err(Error::contract("layer_norm", format!("eps must be >= 0, got {eps}")));
    }
    let mut xhat = vec![0.0f32; rows * d];
    let mut inv_std = vec![0.0f64; rows];
    let mut out = vec![0.0f32; rows * d];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let mu = row.iter().map(|&v| f64::from(v)).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| (f64::from(v) - mu).powi(2))
            .sum::<f64>()
            / d as f64;
        let is = 1.0 / (var + f64::from(eps)).sqrt();
        inv_std[r] = is;
        for c in 0..d {
            let h = ((f64::from(row[c]) - mu) * is) as f32;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gain.data()[c] + bias.data()[c];
        }
    }
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        "layer_norm",
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |g, _, inputs| {
            let gain = inputs[1].data();
            let dx = need(inputs, 0).then(|| {
                let mut dx = vec![0.0f32; rows * d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let (mut s1, mut s2) = (0.0f64, 0.0f64);
                    for c in 0..d {
                        let dh = f64::from(gr[c]) * f64::from(gain[c]);
                        s1 += dh;
                        s2 += dh * f64::from(hr[c]);
                    }
                    let (m1, m2) = (s1 / d as f64, s2 / d as f64);
                    for c in 0..d {
                        let dh = f64::from(gr[c]) * f64::from(gain[c]);
                        dx[r * d + c] = ((dh - m1 - f64::from(hr[c]) * m2) * inv_std[r]) as f32;
                    }
                }
                dx
            });
            let dgain = need(inputs, 1).then(|| {
                let mut acc = vec![0.0f64; d];
                for r in 0..rows {
                    for c in 0..d {
                        acc[c] += f64::from(g[r * d + c]) * f64::from(xhat[r * d + c]);
                    }
                }
                narrow(acc)
            });
            let dbias = need(inputs, 2).then(|| {
                let mut acc = vec![0.0f64; d];
                for chunk in g.chunks(d) {
                    acc.iter_mut().zip(chunk).for_each(|(a, &v)| *a += f64::from(v));
                }
                narrow(acc)
            });
            vec![dx, dgain, dbias]
        }),
    ))
}

/// Scales each row along the last axis to unit Euclidean norm.
pub fn l2_normalize_rows(x: &Tensor) -> Tensor {
    let (rows, d) = rows_cols(x.shape());
    let mut out = vec![0.0f32; rows * d];
    let mut norms = vec![0.0f64; rows];
    for r in 0..rows {
        let row = &x.data()[r * d..(r + 1) * d];
        let n = row
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
            .max(1e-12);
        norms[r] = n;
        for c in 0..d {
            out[r * d + c] = (f64::from(row[c]) / n) as f32;
        }
    }
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        "l2_normalize",
        vec![x.clone()],
        Box::new(move |g, y, _| {
            let mut dx = vec![0.0f32; rows * d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let yr = &y[r * d..(r + 1) * d];
                let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                for c in 0..d {
                    dx[r * d + c] =
                        ((f64::from(gr[c]) - f64::from(yr[c]) * dot) / norms[r]) as f32;
                }
            }
            vec![Some(dx)]
        }),
    )
}

// ---------------------------------------------------------------------------
// softmax family

fn softmax_row(row: &[f32], valid: usize, out: &mut [f32]) {
    let max = row[..valid].iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut denom = 0.0f64;
    for c in 0..valid {
        let e = f64::from(row[c] - max).exp();
        out[c] = e as f32;
        denom += e;
    }
    for v in &mut out[..valid] {
        *v = (f64::from(*v) / denom) as f32;
    }
    out[valid..].iter_mut().for_each(|v| *v = 0.0);
}

fn softmax_backward(g: &[f32], y: &[f32], d: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; y.len()];
    for ((gr, yr), dr) in g.chunks(d).zip(y.chunks(d)).zip(dx.chunks_mut(d)) {
        let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
        for c in 0..d {
            dr[c] = (f64::from(yr[c]) * (f64::from(gr[c]) - dot)) as f32;
        }
    }
    dx
}

/// Softmax along the last axis with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (rows, d) = rows_cols(x.shape());
    let mut out = vec![0.0f32; rows * d];
    for r in 0..rows {
        softmax_row(&x.data()[r * d..(r + 1) * d], d, &mut out[r * d..(r + 1) * d]);
    }
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        "softmax",
        vec![x.clone()],
        Box::new(move |g, y, _| vec![Some(softmax_backward(g, y, d))]),
    )
}

/// Softmax over `[..., n, n]` score blocks where row `i` only sees columns `<= i`.
pub fn causal_softmax(x: &Tensor) -> Result<Tensor> {
    let sh = x.shape();
    let r = sh.len();
    if r < 2 || sh[r - 1] != sh[r - 2] {
        return Err(Error::dim("causal_softmax", sh, &[]));
    }
    let n = sh[r - 1];
    let (rows, _) = rows_cols(sh);
    let mut out = vec![0.0f32; rows * n];
    for row in 0..rows {
        let i = row % n;
        softmax_row(&x.data()[row * n..(row + 1) * n], i + 1, &mut out[row * n..(row + 1) * n]);
    }
    Ok(Tensor::from_op(
        out,
        sh.to_vec(),
        "causal_softmax",
        vec![x.clone()],
        // masked entries have y = 0, so the plain rule yields zero there
        Box::new(move |g, y, _| vec![Some(softmax_backward(g, y, n))]),
    ))
}

/// Mean over rows of `logsumexp(row) - row[target]`.
pub fn cross_entropy_rows(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let sh = logits.shape();
    if sh.len() != 2 || sh[0] != targets.len() {
        return Err(Error::dim("cross_entropy", sh, &[targets.len()]));
    }
    let (n, c) = (sh[0], sh[1]);
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::Input(format!("target {t} out of range for {c} classes")));
    }
    let mut probs = vec![0.0f32; n * c];
    let mut total = 0.0f64;
    for r in 0..n {
        let row = &logits.data()[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let denom: f64 = row.iter().map(|&v| f64::from(v - max).exp()).sum();
        let lse = f64::from(max) + denom.ln();
        total += lse - f64::from(row[targets[r]]);
        for j in 0..c {
            probs[r * c + j] = (f64::from(row[j] - max).exp() / denom) as f32;
        }
    }
    let targets = targets.to_vec();
    Ok(Tensor::from_op(
        vec![(total / n as f64) as f32],
        vec![1],
        "cross_entropy",
        vec![logits.clone()],
        Box::new(move |g, _, _| {
            let s = g[0] / n as f32;
            let mut d = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                d[r * c + t] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= s);
            vec![Some(d)]
        }),
    ))
}

// ---------------------------------------------------------------------------
// layout

/// Same data under a new shape (copies).
pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    if numel(shape) != x.len() || shape.contains(&0) {
        return Err(Error::dim("reshape", x.shape(), shape));
    }
    Ok(Tensor::from_op(
        x.data().to_vec(),
        shape.to_vec(),
        "reshape",
        vec![x.clone()],
        Box::new(|g, _, _| vec![Some(g.to_vec())]),
    ))
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps each output flat index to its source flat index.
fn permutation_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = numel(shape);
    let mut index = Vec::with_capacity(total);
    let mut coord = vec![0usize; out_shape.len()];
    let mut src = 0usize;
    for _ in 0..total {
        index.push(src);
        for ax in (0..out_shape.len()).rev() {
            coord[ax] += 1;
            src += src_strides[ax];
            if coord[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * out_shape[ax];
            coord[ax] = 0;
        }
    }
    (out_shape, index)
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let r = x.shape().len();
    let mut seen = vec![false; r];
    if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::dim("permute", x.shape(), axes));
    }
    let (out_shape, index) = permutation_index(x.shape(), axes);
    let data = index.iter().map(|&i| x.data()[i]).collect();
    Ok(Tensor::from_op(
        data,
        out_shape,
        "permute",
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut dx = vec![0.0f32; g.len()];
            for (o, &i) in index.iter().enumerate() {
                dx[i] = g[o];
            }
            vec![Some(dx)]
        }),
    ))
}

/// Transpose of a 2-D tensor.
pub fn transpose(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 2 {
        return Err(Error::dim("transpose", x.shape(), &[]));
    }
    permute(x, &[1, 0])
}

/// Selects rows (over the last axis) by index; repeated indices are allowed and
/// their gradients add up. Output shape is `[idx.len(), d]`.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (rows, d) = rows_cols(x.shape());
    if idx.is_empty() {
        return Err(Error::Input("gather_rows needs at least one index".into()));
    }
    if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
        return Err(Error::Range(format!("row {bad} out of {rows}")));
    }
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    let idx = idx.to_vec();
    Ok(Tensor::from_op(
        data,
        vec![idx.len(), d],
        "gather_rows",
        vec![x.clone()],
        Box::new(move |g, _, _| {
            let mut dx = vec![0.0f32; rows * d];
            for (o, &i) in idx.iter().enumerate() {
                dx[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&g[o * d..(o + 1) * d])
                    .for_each(|(a, b)| *a += b);
            }
            vec![Some(dx)]
        }),
    ))
}

/// `[b, n, d]` with `token[d]` inserted at position 0 of every sequence.
pub fn prepend_token(x: &Tensor, token: &Tensor) -> Result<Tensor> {
    let sh = x.shape();
    if sh.len() != 3 || token.len() != sh[2] {
        return Err(Error::dim("prepend_token", sh, token.shape()));
    }
    let (b, n, d) = (sh[0], sh[1], sh[2]);
    let mut data = Vec::with_capacity(b * (n + 1) * d);
    for s in 0..b {
        data.extend_from_slice(token.data());
        data.extend_from_slice(&x.data()[s * n * d..(s + 1) * n * d]);
    }
    Ok(Tensor::from_op(
        data,
        vec![b, n + 1, d],
        "prepend_token",
        vec![x.clone(), token.clone()],
        Box::new(move |g, _, inputs| {
            let dx = need(inputs, 0).then(|| {
                let mut dx = Vec::with_capacity(b * n * d);
                for s in 0..b {
                    let base = s * (n + 1) * d;
                    dx.extend_from_slice(&g[base + d..base + (n + 1) * d]);
                }
                dx
            });
            let dt = need(inputs, 1).then(|| {
                let mut acc = vec![0.0f64; d];
                for s in 0..b {
                    let base = s * (n + 1) * d;
                    acc.iter_mut()
                        .zip(&g[base..base + d])
                        .for_each(|(a, &v)| *a += f64::from(v));
                }
                narrow(acc)
            });
            vec![dx, dt]
        }),
    ))
}

/// Stochastic depth: zeroes whole samples (leading axis) with probability
/// `rate` and rescales survivors by `1 / (1 - rate)`. Identity when `rate == 0`.
pub fn drop_path<R: Rng + ?Sized>(x: &Tensor, rate: f32, rng: &mut R) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Range(format!("drop path rate {rate} not in [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(x.clone());
    }
    let b = x.shape()[0];
    let per = x.len() / b;
    let keep: Vec<f32> = (0..b)
        .map(|_| {
            if rng.random::<f32>() < rate {
                0.0
            } else {
                1.0 / (1.0 - rate)
            }
        })
        .collect();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * keep[i / per])
        .collect();
    Ok(Tensor::from_op(
        data,
        x.shape().to_vec(),
        "drop_path",
        vec![x.clone()],
        Box::new(move |g, _, _| {
            vec![Some(g.iter().enumerate().map(|(i, v)| v * keep[i / per]).collect())]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn close(a: &[f32], b: &[f32], tol: f32) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn t(data: &[f32], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let a = t(&[1., 2., 3., 4.], &[2, 2]);
        let b = t(&[5., 6., 7., 8.], &[2, 2]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_identity() {
        let a = t(&[1., -2., 0.5, 3., 4., 5., 6., 7., 8.], &[3, 3]);
        let i = t(&[1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]);
        assert_eq!(matmul(&a, &i).unwrap().data(), a.data());
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn layer_norm_hand_example() {
        let x = t(&[1., 2., 3.], &[1, 3]);
        let y = layer_norm(&x, &t(&[1.; 3], &[3]), &t(&[0.; 3], &[3]), 0.0).unwrap();
        assert!(close(y.data(), &[-1.224_744_9, 0.0, 1.224_744_9], 1e-6));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = t(&[4.; 5], &[1, 5]);
        let y = layer_norm(&x, &t(&[1.; 5], &[5]), &t(&[0.; 5], &[5]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_gain_mismatch() {
        let x = Tensor::zeros(&[2, 4]);
        let r = layer_norm(&x, &Tensor::zeros(&[3]), &Tensor::zeros(&[4]), 1e-5);
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&t(&[0., 0.], &[1, 2]));
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_rows(&t(&[2f32.ln(), 0.], &[1, 2]));
        assert!(close(y.data(), &[2. / 3., 1. / 3.], 1e-7));
        let y = softmax_rows(&t(&[1000., 0.], &[1, 2]));
        assert_eq!(y.data()[0], 1.0);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-30);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let y = causal_softmax(&t(&[5., 9., 1., 2.], &[2, 2])).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn permute_round_trip() {
        let x = t(&(0..24).map(|v| v as f32).collect::<Vec<_>>(), &[2, 3, 4]);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[k][i][j] == x[i][j][k]
        assert_eq!(p.data()[6 + 3 + 2], x.data()[12 + 2 * 4 + 1]);
        let back = permute(&p, &[1, 2, 0]).unwrap();
        assert_eq!(back.data(), x.data());
        assert!(permute(&x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn gather_rows_repeated_indices_accumulate() {
        let x = Tensor::param(vec![1., 2., 3., 4.], &[2, 2]).unwrap();
        let y = gather_rows(&x, &[1, 1, 0]).unwrap();
        assert_eq!(y.data(), &[3., 4., 3., 4., 1., 2.]);
        crate::tensor::backward(&sum(&y)).unwrap();
        assert_eq!(x.grad().unwrap().as_slice(), &[1., 1., 2., 2.]);
    }

    #[test]
    fn drop_path_zero_rate_is_identity() {
        let x = t(&[1., 2., 3., 4.], &[2, 2]);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let y = drop_path(&x, 0.0, &mut rng).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let l = cross_entropy_rows(&t(&[0.; 8], &[2, 4]), &[0, 3]).unwrap();
        assert!((l.item().unwrap() - 4f32.ln()).abs() < 1e-6);
    }
}
