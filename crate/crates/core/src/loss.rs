//! Symmetric image-text contrastive objective with a learnable temperature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingOutput, ParamStore, INIT_LOG_SCALE, LOGIT_SCALE};
use crate::tensor::{
    add, clamp_max, cross_entropy_rows, exp, matmul, mul_scalar, scale, transpose, Tensor,
};

/// ln(100): the logit scale never exceeds 100.
pub const MAX_LOG_SCALE: f32 = 4.605_170_2;

/// Tolerance on row norms accepted as "normalized".
const NORM_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitScale {
    pub log_scale: f32,
    pub max_log_scale: f32,
}

impl Default for LogitScale {
    fn default() -> Self {
        LogitScale {
            log_scale: INIT_LOG_SCALE,
            max_log_scale: MAX_LOG_SCALE,
        }
    }
}

impl LogitScale {
    pub fn effective(&self) -> f32 {
        self.log_scale.min(self.max_log_scale).exp()
    }

    /// Caps `log_scale` at `max_log_scale`.
    pub fn clamp(&mut self) {
        self.log_scale = self.log_scale.min(self.max_log_scale);
    }
}

/// Applies the logit-scale clamp to the stored parameter.
pub fn clamp_scale(params: &mut ParamStore, max_log_scale: f32) {
    if let Some(p) = params.get_mut(LOGIT_SCALE) {
        let mut s = LogitScale {
            log_scale: p.data[0],
            max_log_scale,
        };
        s.clamp();
        p.data[0] = s.log_scale;
    }
}

/// `logits[i][j] = exp(min(log_scale, max)) · ⟨img_i, txt_j⟩`.
pub fn similarity_logits(
    img: &EmbeddingOutput,
    txt: &EmbeddingOutput,
    log_scale: &Tensor,
    max_log_scale: f32,
) -> Result<Tensor> {
    img.check_normalized(NORM_TOL)?;
    txt.check_normalized(NORM_TOL)?;
    if img.vector.shape() != txt.vector.shape() {
        return Err(Error::dim(
            "similarity_logits",
            img.vector.shape(),
            txt.vector.shape(),
        ));
    }
    let sims = matmul(&img.vector, &transpose(&txt.vector)?)?;
    let s = exp(&clamp_max(log_scale, max_log_scale));
    mul_scalar(&sims, &s)
}

/// Mean of the image→text and text→image cross-entropies, matched pairs on
/// the diagonal.
pub fn clip_loss(logits: &Tensor) -> Result<Tensor> {
    let sh = logits.shape();
    if sh.len() != 2 || sh[0] != sh[1] {
        return Err(Error::dim("clip_loss", sh, &[]));
    }
    let targets: Vec<usize> = (0..sh[0]).collect();
    let rows = cross_entropy_rows(logits, &targets)?;
    let cols = cross_entropy_rows(&transpose(logits)?, &targets)?;
    Ok(scale(&add(&rows, &cols)?, 0.5))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, l2_normalize_rows};

    fn emb(data: Vec<f32>, b: usize, d: usize) -> EmbeddingOutput {
        EmbeddingOutput::normalized(l2_normalize_rows(&Tensor::new(data, &[b, d]).unwrap()))
    }

    #[test]
    fn orthonormal_pairs_give_scaled_identity() {
        let eye = emb(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], 3, 3);
        let ls = Tensor::new(vec![2f32.ln()], &[1]).unwrap();
        let l = similarity_logits(&eye, &eye, &ls, MAX_LOG_SCALE).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 2.0 } else { 0.0 };
                assert!((l.data()[i * 3 + j] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn unnormalized_rejected() {
        let raw = EmbeddingOutput::raw(Tensor::new(vec![3., 4.], &[1, 2]).unwrap());
        let ok = emb(vec![3., 4.], 1, 2);
        let ls = Tensor::scalar(0.0);
        assert!(matches!(
            similarity_logits(&raw, &ok, &ls, MAX_LOG_SCALE),
            Err(Error::Contract { .. })
        ));
        let lying = EmbeddingOutput::normalized(Tensor::new(vec![3., 4.], &[1, 2]).unwrap());
        assert!(similarity_logits(&lying, &ok, &ls, MAX_LOG_SCALE).is_err());
    }

    #[test]
    fn loss_edge_cases() {
        let one = Tensor::new(vec![3.7], &[1, 1]).unwrap();
        assert!(clip_loss(&one).unwrap().item().unwrap().abs() < 1e-7);
        let flat = Tensor::new(vec![0.3; 64], &[8, 8]).unwrap();
        let l = clip_loss(&flat).unwrap().item().unwrap();
        assert!((l - 2.079_441_5).abs() < 1e-6, "{l}");
        assert!(clip_loss(&Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn large_scale_orthonormal_pairs_approach_zero() {
        let eye = emb(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], 3, 3);
        let ls = Tensor::scalar(MAX_LOG_SCALE);
        let l = clip_loss(&similarity_logits(&eye, &eye, &ls, MAX_LOG_SCALE).unwrap()).unwrap();
        assert!(l.item().unwrap() < 1e-40_f32.max(1e-30));
    }

    #[test]
    fn clamp_examples() {
        let mut s = LogitScale {
            log_scale: 5.0,
            max_log_scale: MAX_LOG_SCALE,
        };
        s.clamp();
        assert!((s.log_scale - 4.605_17).abs() < 1e-5);
        let mut s = LogitScale::default();
        s.clamp();
        assert_eq!(s.log_scale, INIT_LOG_SCALE);
        assert!((LogitScale::default().effective() - 1.0 / 0.07).abs() < 1e-3);
    }

    #[test]
    fn clamped_scale_has_zero_gradient() {
        let e = emb(vec![1., 0., 0.6, 0.8], 2, 2);
        let ls = Tensor::param(vec![6.0], &[1]).unwrap();
        let loss = clip_loss(&similarity_logits(&e, &e, &ls, MAX_LOG_SCALE).unwrap()).unwrap();
        backward(&loss).unwrap();
        assert_eq!(ls.grad().unwrap()[0], 0.0);
    }
}
