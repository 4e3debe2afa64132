use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this the scaler declares divergence.
pub const MIN_LOSS_SCALE: f64 = 1.0 / 1_048_576.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalerConfig {
    pub init_scale: f64,
    pub growth_interval: u64,
    pub growth_factor: f64,
    pub backoff_factor: f64,
}

impl Default for ScalerConfig {
    fn default() -> Self {
        ScalerConfig {
            init_scale: 32768.0,
            growth_interval: 2000,
            growth_factor: 2.0,
            backoff_factor: 0.5,
        }
    }
}

/// Dynamic loss-scaling state machine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    pub scale: f64,
    pub good_steps: u64,
    pub growth_interval: u64,
    pub growth_factor: f64,
    pub backoff_factor: f64,
}

impl Default for LossScaler {
    fn default() -> Self {
        LossScaler::new(ScalerConfig::default()).expect("defaults are valid")
    }
}

impl LossScaler {
    pub fn new(cfg: ScalerConfig) -> Result<Self> {
        if !(cfg.init_scale > 0.0) || !cfg.init_scale.is_finite() {
            return Err(Error::config("init_scale", "must be positive and finite"));
        }
        if cfg.growth_interval == 0 {
            return Err(Error::config("growth_interval", "must be at least 1"));
        }
        if !(cfg.growth_factor > 1.0) {
            return Err(Error::config("growth_factor", "must exceed 1"));
        }
        if !(cfg.backoff_factor > 0.0 && cfg.backoff_factor < 1.0) {
            return Err(Error::config("backoff_factor", "must lie in (0, 1)"));
        }
        Ok(LossScaler {
            scale: cfg.init_scale,
            good_steps: 0,
            growth_interval: cfg.growth_interval,
            growth_factor: cfg.growth_factor,
            backoff_factor: cfg.backoff_factor,
        })
    }

    /// Records the outcome of one attempted step; returns whether the
    /// optimizer update should be applied.
    pub fn update(&mut self, overflow: bool) -> Result<bool> {
        if overflow {
            self.scale *= self.backoff_factor;
            self.good_steps = 0;
            if self.scale < MIN_LOSS_SCALE {
                return Err(Error::Divergence {
                    msg: format!("loss scale underflow ({:e})", self.scale),
                    recent: Vec::new(),
                });
            }
            return Ok(false);
        }
        self.good_steps += 1;
        if self.good_steps == self.growth_interval {
            self.scale *= self.growth_factor;
            self.good_steps = 0;
        }
        Ok(true)
    }

    pub fn at_floor(&self) -> bool {
        self.scale * self.backoff_factor < MIN_LOSS_SCALE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_on_overflow() {
        let mut s = LossScaler::default();
        assert_eq!(s.scale, 32768.0);
        assert!(!s.update(true).unwrap());
        assert_eq!(s.scale, 16384.0);
    }

    #[test]
    fn grows_once_per_interval() {
        let mut s = LossScaler::default();
        for _ in 0..1999 {
            assert!(s.update(false).unwrap());
        }
        assert_eq!(s.scale, 32768.0);
        s.update(false).unwrap();
        assert_eq!(s.scale, 65536.0);
        assert_eq!(s.good_steps, 0);
    }

    #[test]
    fn alternating_never_grows() {
        let mut s = LossScaler::new(ScalerConfig {
            growth_interval: 2,
            ..ScalerConfig::default()
        })
        .unwrap();
        let mut prev = s.scale;
        for _ in 0..10 {
            s.update(true).unwrap();
            s.update(false).unwrap();
            assert_eq!(s.scale, prev * 0.5);
            prev = s.scale;
        }
    }

    #[test]
    fn underflow_is_divergence() {
        let mut s = LossScaler::new(ScalerConfig {
            init_scale: 1.0,
            ..ScalerConfig::default()
        })
        .unwrap();
        for _ in 0..20 {
            s.update(true).unwrap();
        }
        assert!(s.at_floor());
        assert!(matches!(s.update(true), Err(Error::Divergence { .. })));
    }
}
