//! Four-arm ablation: initialization, optimizer and masking.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::config::{InitPolicy, TrainConfig};
use super::trainer::{eval_loss, Trainer};
use crate::data::{Dataset, Record, Tokenizer};
use crate::error::{Error, Result};
use crate::eval::{class_embeddings, embed_images, zero_shot_classify, EvalSet};
use crate::model::ParamStore;
use crate::optim::OptimizerKind;

const EVAL_BATCH: usize = 64;
/// Records averaged into the reported final training loss.
const TAIL: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ArmSpec {
    pub name: &'static str,
    pub from_checkpoint: bool,
    pub optimizer: OptimizerKind,
    pub masked: bool,
}

pub const ARMS: [ArmSpec; 4] = [
    ArmSpec {
        name: "scratch/adamw",
        from_checkpoint: false,
        optimizer: OptimizerKind::AdamW,
        masked: false,
    },
    ArmSpec {
        name: "init/adamw",
        from_checkpoint: true,
        optimizer: OptimizerKind::AdamW,
        masked: false,
    },
    ArmSpec {
        name: "init/lamb",
        from_checkpoint: true,
        optimizer: OptimizerKind::Lamb,
        masked: false,
    },
    ArmSpec {
        name: "init/lamb/mask",
        from_checkpoint: true,
        optimizer: OptimizerKind::Lamb,
        masked: true,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmResult {
    pub arm: ArmSpec,
    pub mask_ratio: f64,
    pub steps: u64,
    /// Mean training loss over the last few steps.
    pub final_train_loss: f64,
    /// Unmasked loss on a fixed held-out batch.
    pub heldout_loss: f64,
    pub zero_shot_top1: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EqualTime {
    pub budget_secs: f64,
    pub unmasked_steps: u64,
    pub masked_steps: u64,
    pub step_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub prior_steps: u64,
    pub steps_per_arm: u64,
    pub arms: Vec<ArmResult>,
    pub equal_time: EqualTime,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm.name == name)
    }

    /// Markdown comparison table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "| arm | init | optimizer | mask | steps | train loss | held-out loss | zero-shot top-1 | secs |"
        );
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|---|");
        for a in &self.arms {
            let _ = writeln!(
                s,
                "| {} | {} | {:?} | {} | {} | {:.4} | {:.4} | {:.1} | {:.1} |",
                a.arm.name,
                if a.arm.from_checkpoint { "checkpoint" } else { "scratch" },
                a.arm.optimizer,
                a.mask_ratio,
                a.steps,
                a.final_train_loss,
                a.heldout_loss,
                a.zero_shot_top1,
                a.wall_secs
            );
        }
        let e = &self.equal_time;
        let _ = writeln!(
            s,
            "\nequal wall-clock ({:.0}s each): unmasked {} steps, masked {} steps, ratio {:.2}",
            e.budget_secs, e.unmasked_steps, e.masked_steps, e.step_ratio
        );
        s
    }
}

/// Inputs shared by every arm.
pub struct AblationData {
    pub train: Arc<Dataset>,
    pub holdout: Vec<Record>,
    pub class_names: Vec<String>,
    pub templates: Vec<String>,
}

fn arm_config(base: &TrainConfig, arm: &ArmSpec) -> TrainConfig {
    let mut c = base.clone();
    c.optimizer = arm.optimizer;
    if !arm.masked {
        c.mask_ratio = 0.0;
    }
    c.init_policy = match (arm.from_checkpoint, base.init_policy) {
        (false, _) => InitPolicy::Scratch,
        (true, InitPolicy::Scratch) => InitPolicy::BothFromCheckpoint,
        (true, p) => p,
    };
    c.init_checkpoint = None;
    c
}

/// Trains a scratch run for `ablation_prior_steps` to produce the
/// initialization, runs every arm for `total_steps`, then races the two LAMB
/// arms for `ablation_wallclock_secs` each. `dir` receives per-arm step logs,
/// `ablation.json` and `ablation.md`.
pub fn ablate(config: &TrainConfig, data: &AblationData, dir: Option<&Path>) -> Result<AblationReport> {
    config.validate()?;
    if !(config.mask_ratio > 0.0) {
        return Err(Error::config("mask_ratio", "the masked arm needs a positive ratio"));
    }
    if config.ablation_prior_steps == 0 {
        return Err(Error::config("ablation_prior_steps", "must be positive"));
    }
    let sub = |name: &str| dir.map(|d| d.join(name.replace('/', "-")));

    let mut prior_cfg = config.clone();
    prior_cfg.init_policy = InitPolicy::Scratch;
    prior_cfg.total_steps = config.ablation_prior_steps;
    prior_cfg.warmup_steps = config.warmup_steps.min(prior_cfg.total_steps);
    prior_cfg.mask_ratio = 0.0;
    // a different stream of batches and initial weights than the arms use
    prior_cfg.seed = config.seed.wrapping_add(0x5eed);
    let mut prior = Trainer::with_init(prior_cfg, data.train.clone(), None)?;
    prior.run(sub("prior").as_deref())?;
    let init = prior.params.clone();

    let held = Dataset::new(data.holdout.clone(), data.train.image_size, data.train.channels)?;
    let n = held.len().min(EVAL_BATCH);
    let eval_batch = held.assemble(
        &(0..n).collect::<Vec<_>>(),
        &Tokenizer::new(config.context_length_tokens),
        None,
        0,
        0,
    )?;
    let eval_set = EvalSet::from_records(&data.holdout, held.image_size, held.channels)?;

    let mut arms = Vec::new();
    for arm in &ARMS {
        let cfg = arm_config(config, arm);
        let mask_ratio = cfg.mask_ratio;
        let start = Instant::now();
        let mut t = Trainer::with_init(cfg, data.train.clone(), Some(&init))?;
        let recs = t.run(sub(arm.name).as_deref())?;
        let wall_secs = start.elapsed().as_secs_f64();
        let tail: Vec<f64> = recs
            .iter()
            .filter(|r| !r.overflow)
            .rev()
            .take(TAIL)
            .map(|r| r.loss)
            .collect();
        let model = t.clip_model();
        let classes = class_embeddings(&model, &data.class_names, &data.templates)?;
        let emb = embed_images(&model, &eval_set.images)?;
        let zs = zero_shot_classify(&emb, &classes, Some(&eval_set.labels))?;
        arms.push(ArmResult {
            arm: *arm,
            mask_ratio,
            steps: t.optimizer.step,
            final_train_loss: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
            heldout_loss: eval_loss(&model, &eval_batch, config.max_log_scale)?,
            zero_shot_top1: zs.top1_acc.expect("labels given"),
            wall_secs,
        });
    }

    let equal_time = race(config, data.train.clone(), &init)?;
    let report = AblationReport {
        prior_steps: config.ablation_prior_steps,
        steps_per_arm: config.total_steps,
        arms,
        equal_time,
    };
    if let Some(d) = dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let json = d.join("ablation.json");
        fs::write(&json, serde_json::to_string_pretty(&report).expect("report serializes"))
            .map_err(|e| Error::io(&json, e))?;
        let md = d.join("ablation.md");
        fs::write(&md, report.table()).map_err(|e| Error::io(&md, e))?;
    }
    Ok(report)
}

/// Steps completed by the unmasked and masked LAMB arms within the same
/// wall-clock budget. Whichever arm has used less time steps next.
fn race(config: &TrainConfig, train: Arc<Dataset>, init: &ParamStore) -> Result<EqualTime> {
    let budget = Duration::from_secs_f64(config.ablation_wallclock_secs);
    let mut trainers = Vec::new();
    for arm in &ARMS[2..] {
        let mut cfg = arm_config(config, arm);
        // long enough that neither schedule ends inside the budget
        cfg.total_steps = cfg.total_steps.max(1 << 40);
        trainers.push(Trainer::with_init(cfg, train.clone(), Some(init))?);
    }
    let mut used = [Duration::ZERO; 2];
    let mut steps = [0u64; 2];
    while used.iter().any(|&u| u < budget) {
        let a = if used[0] <= used[1] { 0 } else { 1 };
        let start = Instant::now();
        let rec = trainers[a].step()?;
        used[a] += start.elapsed();
        if used[a] <= budget && !rec.overflow {
            steps[a] += 1;
        }
    }
    Ok(EqualTime {
        budget_secs: budget.as_secs_f64(),
        unmasked_steps: steps[0],
        masked_steps: steps[1],
        step_ratio: steps[1] as f64 / steps[0].max(1) as f64,
    })
}
