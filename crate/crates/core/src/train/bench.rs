use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use super::config::TrainConfig;
use super::trainer::Trainer;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::memory;

/// Untimed steps at the start of each arm.
pub const BENCH_WARMUP: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmTiming {
    pub mask_ratio: f64,
    pub median_step_ms: f64,
    pub step_ms: Vec<f64>,
    pub secs_per_million_samples: f64,
    pub peak_tensor_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub timed_steps: usize,
    pub masked: ArmTiming,
    pub unmasked: ArmTiming,
    /// Masked over unmasked median step time.
    pub time_ratio: f64,
    pub memory_ratio: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Times `steps` training steps (the first [`BENCH_WARMUP`] untimed) with the
/// config's mask ratio against the same config unmasked. The two arms
/// alternate step by step, swapping which goes first each round.
pub fn bench(config: &TrainConfig, dataset: Arc<Dataset>, steps: usize) -> Result<BenchReport> {
    if steps <= BENCH_WARMUP {
        return Err(Error::config(
            "steps",
            format!("need more than {BENCH_WARMUP} steps to time anything"),
        ));
    }
    if !(config.mask_ratio > 0.0) {
        return Err(Error::config("mask_ratio", "bench compares a masked arm against unmasked"));
    }
    let mut cfg = config.clone();
    cfg.total_steps = cfg.total_steps.max(steps as u64);
    cfg.warmup_steps = cfg.warmup_steps.min(cfg.total_steps);
    cfg.init_policy = super::config::InitPolicy::Scratch;
    let mut unmasked_cfg = cfg.clone();
    unmasked_cfg.mask_ratio = 0.0;
    let mut arms = [
        Trainer::with_init(cfg, dataset.clone(), None)?,
        Trainer::with_init(unmasked_cfg, dataset, None)?,
    ];
    let mut times = [Vec::new(), Vec::new()];
    let mut peaks = [0usize; 2];
    for i in 0..steps {
        let order = if i % 2 == 0 { [0, 1] } else { [1, 0] };
        for a in order {
            memory::reset_peak();
            let base = memory::live_bytes();
            let start = Instant::now();
            arms[a].step()?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            if i >= BENCH_WARMUP {
                times[a].push(ms);
                peaks[a] = peaks[a].max(memory::peak_bytes() - base);
            }
        }
    }
    let b = config.batch_size;
    let arm = |a: usize, ratio: f64| {
        let med = median(&times[a]);
        ArmTiming {
            mask_ratio: ratio,
            median_step_ms: med,
            step_ms: times[a].clone(),
            secs_per_million_samples: med / 1e3 * 1e6 / b as f64,
            peak_tensor_bytes: peaks[a],
        }
    };
    let masked = arm(0, config.mask_ratio);
    let unmasked = arm(1, 0.0);
    Ok(BenchReport {
        batch_size: b,
        warmup_steps: BENCH_WARMUP,
        timed_steps: steps - BENCH_WARMUP,
        time_ratio: masked.median_step_ms / unmasked.median_step_ms,
        memory_ratio: masked.peak_tensor_bytes as f64 / unmasked.peak_tensor_bytes.max(1) as f64,
        masked,
        unmasked,
    })
}
