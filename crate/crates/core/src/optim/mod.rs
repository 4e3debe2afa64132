//! LAMB and AdamW with per-tower parameter groups, layer-wise learning-rate
//! decay, warmup schedules and a dynamic loss scaler.

mod groups;
mod scaler;
mod schedule;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{is_decay_exempt, ParamStore};

pub use groups::{
    build_groups, group_lrs, layer_scales, param_depth, tensor_lrs, GroupLrs, ParamGroup,
};
pub use scaler::{LossScaler, ScalerConfig, MIN_LOSS_SCALE};
pub use schedule::{Schedule, ScheduleShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Lamb,
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Lamb,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.05,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("beta1", format!("{} not in [0, 1)", self.beta1)));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", format!("{} not in [0, 1)", self.beta2)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", format!("{} must be positive", self.eps)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config(
                "weight_decay",
                format!("{} must be non-negative", self.weight_decay),
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates of one tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Advances the moments and returns the bias-corrected Adam direction
/// `m̂ / (√v̂ + ε)` for step `t` (1-based).
fn adam_direction(g: &[f32], st: &mut Moments, t: u64, cfg: &OptimizerConfig) -> Vec<f64> {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    g.iter()
        .zip(st.m.iter_mut().zip(st.v.iter_mut()))
        .map(|(&g, (m, v))| {
            let g = f64::from(g);
            *m = (b1 * f64::from(*m) + (1.0 - b1) * g) as f32;
            *v = (b2 * f64::from(*v) + (1.0 - b2) * g * g) as f32;
            let m_hat = f64::from(*m) / c1;
            let v_hat = f64::from(*v) / c2;
            m_hat / (v_hat.sqrt() + cfg.eps)
        })
        .collect()
}

fn check_lengths(w: &[f32], g: &[f32], st: &Moments) -> Result<()> {
    if w.len() != g.len() || st.m.len() != w.len() || st.v.len() != w.len() {
        return Err(Error::dim("optimizer", &[w.len()], &[g.len(), st.m.len(), st.v.len()]));
    }
    Ok(())
}

/// One LAMB update of a single tensor. Returns the trust ratio used.
#[allow(clippy::too_many_arguments)]
pub fn lamb_step(
    w: &mut [f32],
    g: &[f32],
    st: &mut Moments,
    t: u64,
    cfg: &OptimizerConfig,
    lr: f64,
    apply_decay: bool,
    force_unit_trust: bool,
) -> Result<f64> {
    check_lengths(w, g, st)?;
    let lambda = if apply_decay { cfg.weight_decay } else { 0.0 };
    let mut u = adam_direction(g, st, t, cfg);
    for (u, &w) in u.iter_mut().zip(w.iter()) {
        *u += lambda * f64::from(w);
    }
    let phi = if force_unit_trust {
        1.0
    } else {
        let wn = w.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
        let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if wn > 0.0 && un > 0.0 {
            wn / un
        } else {
            1.0
        }
    };
    for (w, u) in w.iter_mut().zip(&u) {
        *w = (f64::from(*w) - lr * phi * u) as f32;
    }
    Ok(phi)
}

/// One AdamW update with decoupled weight decay.
pub fn adamw_step(
    w: &mut [f32],
    g: &[f32],
    st: &mut Moments,
    t: u64,
    cfg: &OptimizerConfig,
    lr: f64,
    apply_decay: bool,
) -> Result<()> {
    check_lengths(w, g, st)?;
    let lambda = if apply_decay { cfg.weight_decay } else { 0.0 };
    let u = adam_direction(g, st, t, cfg);
    for (w, u) in w.iter_mut().zip(&u) {
        let x = f64::from(*w);
        *w = (x - lr * u - lr * lambda * x) as f32;
    }
    Ok(())
}

pub fn all_finite<'a>(grads: impl IntoIterator<Item = &'a Vec<f32>>) -> bool {
    grads.into_iter().all(|g| g.iter().all(|v| v.is_finite()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Applied { trust_ratios: BTreeMap<String, f64> },
    Overflow,
}

/// Optimizer state over a whole [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    /// Number of updates applied so far.
    pub step: u64,
    pub state: BTreeMap<String, Moments>,
    /// Fixes the LAMB trust ratio at 1.
    pub force_unit_trust: bool,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            step: 0,
            state: BTreeMap::new(),
            force_unit_trust: false,
        })
    }

    /// Applies one update to every parameter named in `grads` using the
    /// per-tensor rates in `lrs`. Non-finite gradients leave all state
    /// untouched and report [`StepOutcome::Overflow`].
    pub fn apply(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f32>>,
        lrs: &BTreeMap<String, f64>,
    ) -> Result<StepOutcome> {
        if !all_finite(grads.values()) {
            return Ok(StepOutcome::Overflow);
        }
        for name in grads.keys() {
            if params.get(name).is_none() {
                return Err(Error::MissingParam(name.clone()));
            }
            if !lrs.contains_key(name) {
                return Err(Error::contract("optimizer", format!("no learning rate for {name}")));
            }
        }
        let t = self.step + 1;
        let mut trust = BTreeMap::new();
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let st = self
                .state
                .entry(name.clone())
                .or_insert_with(|| Moments::zeros(g.len()));
            let decay = !is_decay_exempt(name);
            let lr = lrs[name];
            match self.config.kind {
                OptimizerKind::Lamb => {
                    let phi = lamb_step(
                        &mut p.data,
                        g,
                        st,
                        t,
                        &self.config,
                        lr,
                        decay,
                        self.force_unit_trust,
                    )?;
                    trust.insert(name.clone(), phi);
                }
                OptimizerKind::AdamW => {
                    adamw_step(&mut p.data, g, st, t, &self.config, lr, decay)?;
                }
            }
        }
        self.step = t;
        Ok(StepOutcome::Applied {
            trust_ratios: trust,
        })
    }
}
