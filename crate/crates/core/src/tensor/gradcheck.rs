use super::{backward, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Worst `|analytic_i - numeric_i|`, divided by the largest gradient
    /// magnitude seen on either side.
    pub max_rel_error: f64,
    pub worst_index: usize,
}

/// Compares the analytic gradient of a scalar function at `x` against central
/// differences with step `eps`.
///
/// Differences are formed in f64 from the actual (f32-rounded) perturbation.
/// Errors are scaled by the gradient's infinity norm so that near-zero
/// components are judged against the tensor's overall gradient magnitude
/// instead of blowing up.
pub fn grad_check<F>(f: F, x: &[f32], shape: &[usize], eps: f32) -> Result<GradCheckReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let leaf = Tensor::param(x.to_vec(), shape)?;
    let out = f(&leaf)?;
    if out.len() != 1 {
        return Err(Error::contract("grad_check", "function must be scalar-valued"));
    }
    backward(&out)?;
    let analytic: Vec<f64> = match leaf.grad() {
        Some(g) => g.iter().map(|&v| f64::from(v)).collect(),
        None => vec![0.0; x.len()],
    };

    let eval = |v: Vec<f32>| -> Result<f64> { Ok(f64::from(f(&Tensor::new(v, shape)?)?.item()?)) };
    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let (mut plus, mut minus) = (x.to_vec(), x.to_vec());
        plus[i] += eps;
        minus[i] -= eps;
        let step = f64::from(plus[i]) - f64::from(minus[i]);
        numeric.push((eval(plus)? - eval(minus)?) / step);
    }

    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()));
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / scale;
        if err > report.max_rel_error || err.is_nan() {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: i,
            };
        }
    }
    Ok(report)
}
