use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Telemetry for one attempted step, including steps skipped on overflow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Schedule step this attempt used (1-based).
    pub step: u64,
    /// Attempt counter (1-based), advances on every step including skipped ones.
    pub attempt: u64,
    pub loss: f64,
    /// Learning rate per parameter group and depth (`"visual/3"`), layer decay applied.
    pub lr: BTreeMap<String, f64>,
    pub logit_scale: f64,
    pub overflow: bool,
    pub loss_scale: f64,
    pub tokens: u64,
    pub samples_seen: u64,
    pub wall_time_ms: f64,
}

impl StepRecord {
    /// The record with its timing field cleared; everything left is a pure
    /// function of config and seeds.
    pub fn deterministic(&self) -> StepRecord {
        StepRecord {
            wall_time_ms: 0.0,
            ..self.clone()
        }
    }
}
