use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Cosine,
    Linear,
}

/// Linear warmup from 0 to the peak, then decay to 0 at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub shape: ScheduleShape,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(
                "warmup_steps",
                format!("{} exceeds total_steps {}", self.warmup_steps, self.total_steps),
            ));
        }
        Ok(())
    }

    /// Multiplier in [0, 1] applied to a peak rate at `step`.
    pub fn factor(&self, step: u64) -> Result<f64> {
        self.validate()?;
        if step > self.total_steps {
            return Err(Error::Range(format!(
                "step {step} beyond total_steps {}",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(step as f64 / self.warmup_steps as f64);
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return Ok(0.0);
        }
        let t = (step - self.warmup_steps) as f64 / span as f64;
        Ok(match self.shape {
            ScheduleShape::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * t).cos()),
            ScheduleShape::Linear => 1.0 - t,
        })
    }

    pub fn lr_at(&self, peak: f64, step: u64) -> Result<f64> {
        Ok(peak * self.factor(step)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(shape: ScheduleShape) -> Schedule {
        Schedule {
            warmup_steps: 2000,
            total_steps: 10_000,
            shape,
        }
    }

    #[test]
    fn warmup_and_boundaries() {
        for shape in [ScheduleShape::Cosine, ScheduleShape::Linear] {
            let s = sched(shape);
            assert_eq!(s.lr_at(4e-4, 0).unwrap(), 0.0);
            assert_eq!(s.lr_at(4e-4, 1000).unwrap(), 2e-4);
            assert_eq!(s.lr_at(4e-4, 2000).unwrap(), 4e-4);
            assert!(s.lr_at(4e-4, 10_000).unwrap().abs() < 1e-20);
            assert!(matches!(s.lr_at(4e-4, 10_001), Err(Error::Range(_))));
        }
    }

    #[test]
    fn decay_midpoint() {
        assert!((sched(ScheduleShape::Cosine).factor(6000).unwrap() - 0.5).abs() < 1e-12);
        assert!((sched(ScheduleShape::Linear).factor(6000).unwrap() - 0.5).abs() < 1e-12);
        assert!((sched(ScheduleShape::Linear).factor(8000).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn degenerate_schedules() {
        let s = Schedule {
            warmup_steps: 0,
            total_steps: 4,
            shape: ScheduleShape::Linear,
        };
        assert_eq!(s.factor(0).unwrap(), 1.0);
        let s = Schedule {
            warmup_steps: 5,
            total_steps: 4,
            shape: ScheduleShape::Linear,
        };
        assert!(s.factor(1).is_err());
    }
}
