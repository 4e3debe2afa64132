use std::collections::{BTreeSet, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::checkpoint::{Checkpoint, CheckpointMeta};
use super::config::{InitPolicy, TrainConfig};
use super::init::{init_from_checkpoint, InitReport};
use super::StepRecord;
use crate::data::{Batch, BatchPlan, Dataset, Prefetcher};
use crate::error::{Error, Result};
use crate::loss::{clamp_scale, clip_loss, similarity_logits, LogitScale};
use crate::model::{
    encode_image, encode_text, ClipModel, ForwardTrace, MaskSpec, Mode, ModelConfig, ParamStore,
    LOGIT_SCALE,
};
use crate::optim::{
    all_finite, build_groups, group_lrs, tensor_lrs, LossScaler, Optimizer, ParamGroup, Schedule,
};
use crate::seeds::{self, stream};
use crate::tensor::backward_scaled;

const RECENT: usize = 10;
pub const STEP_LOG: &str = "steps.ndjson";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.cfck";

/// Owns parameters, optimizer and scaler state for one run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub params: ParamStore,
    pub optimizer: Optimizer,
    pub scaler: LossScaler,
    /// Attempted steps so far, including overflow skips.
    pub attempts: u64,
    pub samples_seen: u64,
    pub init_report: Option<InitReport>,
    /// 1-based attempts whose gradients get an injected infinity.
    pub inject_overflow_at: BTreeSet<u64>,
    groups: Vec<ParamGroup>,
    schedule: Schedule,
    dataset: Arc<Dataset>,
    plan: BatchPlan,
    recent: VecDeque<StepRecord>,
    prefetch: Option<Prefetcher>,
}

impl Trainer {
    /// Fresh run. A non-scratch policy reads `config.init_checkpoint`.
    pub fn new(config: TrainConfig, dataset: Arc<Dataset>) -> Result<Self> {
        let source = match (config.init_policy, &config.init_checkpoint) {
            (InitPolicy::Scratch, _) => None,
            (_, Some(path)) => Some(Checkpoint::load(path)?.params),
            (_, None) => {
                return Err(Error::config("init_checkpoint", "required by init_policy"));
            }
        };
        Self::with_init(config, dataset, source.as_ref())
    }

    /// Fresh run initialized from in-memory parameters under the config's
    /// init policy.
    pub fn with_init(
        config: TrainConfig,
        dataset: Arc<Dataset>,
        source: Option<&ParamStore>,
    ) -> Result<Self> {
        config.validate()?;
        let model = config.model();
        let mut params = ParamStore::init(&model, seeds::derive(config.seed, stream::INIT, 0))?;
        let init_report = match source {
            Some(src) if config.init_policy != InitPolicy::Scratch => Some(init_from_checkpoint(
                &mut params,
                &model,
                src,
                config.init_policy,
                config.init_strict,
            )?),
            _ => None,
        };
        let optimizer = Optimizer::new(config.optimizer_config())?;
        let scaler = LossScaler::new(config.scaler_config())?;
        let mut t = Self::assemble(config, model, params, optimizer, scaler, dataset)?;
        t.init_report = init_report;
        Ok(t)
    }

    /// Continues the run captured in `ckpt`.
    pub fn resume(config: TrainConfig, dataset: Arc<Dataset>, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        if ckpt.meta.seed != config.seed {
            return Err(Error::config(
                "seed",
                format!("checkpoint was written with seed {}", ckpt.meta.seed),
            ));
        }
        let model = config.model();
        if ckpt.meta.model != model {
            return Err(Error::config("model", "checkpoint architecture differs from config"));
        }
        ckpt.params.validate(&model)?;
        let mut optimizer = ckpt.optimizer()?;
        optimizer.config = config.optimizer_config();
        let mut t = Self::assemble(
            config,
            model,
            ckpt.params.clone(),
            optimizer,
            ckpt.meta.scaler,
            dataset,
        )?;
        t.attempts = ckpt.meta.attempts;
        t.samples_seen = ckpt.meta.samples_seen;
        Ok(t)
    }

    fn assemble(
        config: TrainConfig,
        model: ModelConfig,
        params: ParamStore,
        optimizer: Optimizer,
        scaler: LossScaler,
        dataset: Arc<Dataset>,
    ) -> Result<Self> {
        if dataset.image_size != model.image.image_size || dataset.channels != model.image.channels
        {
            return Err(Error::config(
                "image_size_px",
                format!(
                    "model expects {}px × {} channels, data has {}px × {}",
                    model.image.image_size,
                    model.image.channels,
                    dataset.image_size,
                    dataset.channels
                ),
            ));
        }
        let groups = build_groups(&model, &params, &config.group_lrs())?;
        let plan = BatchPlan {
            seed: config.seed,
            batch_size: config.batch_size,
            crop: config.crop(),
            context_length: model.text.context_length,
        };
        Ok(Trainer {
            schedule: config.schedule(),
            config,
            model,
            params,
            optimizer,
            scaler,
            attempts: 0,
            samples_seen: 0,
            init_report: None,
            inject_overflow_at: BTreeSet::new(),
            groups,
            dataset,
            plan,
            recent: VecDeque::with_capacity(RECENT),
            prefetch: None,
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn is_done(&self) -> bool {
        self.optimizer.step >= self.schedule.total_steps
    }

    pub fn clip_model(&self) -> ClipModel {
        ClipModel {
            config: self.model.clone(),
            params: self.params.clone(),
        }
    }

    fn next_batch(&mut self) -> Result<Batch> {
        if self.config.prefetch_depth == 0 {
            return self.dataset.batch(&self.plan, self.attempts);
        }
        let (dataset, plan, first, depth) = (
            self.dataset.clone(),
            self.plan,
            self.attempts,
            self.config.prefetch_depth,
        );
        let pf = self
            .prefetch
            .get_or_insert_with(|| Prefetcher::spawn(dataset, plan, first, depth));
        pf.next()
            .unwrap_or_else(|| Err(Error::contract("prefetch", "producer stopped")))
    }

    /// Draws the next batch and runs one training step on it.
    pub fn step(&mut self) -> Result<StepRecord> {
        let start = Instant::now();
        let batch = self.next_batch()?;
        let mut rec = self.train_step(&batch)?;
        rec.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        Ok(rec)
    }

    /// Forward, scaled backward, overflow check, update or skip, clamp.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepRecord> {
        let start = Instant::now();
        let attempt = self.attempts + 1;
        let step = self.optimizer.step + 1;
        let lrs = tensor_lrs(&self.groups, &self.schedule, step)?;
        let b = batch.len();
        let mut rng = seeds::rng(self.config.seed, stream::STEP, self.attempts);
        let bound = self.params.bind(true);
        let mask = if self.config.mask_ratio > 0.0 {
            Some(MaskSpec::new(self.config.mask_ratio)?)
        } else {
            None
        };
        let mut trace = ForwardTrace::default();
        let e = self.model.embed_dim;
        let img = encode_image(
            &batch.image_tensor()?,
            &self.model.image,
            e,
            &bound,
            Mode::Train,
            mask.as_ref(),
            &mut rng,
            Some(&mut trace),
        )?;
        let txt = encode_text(&batch.tokens, b, &self.model.text, e, &bound, &mut rng, None)?;
        let logits =
            similarity_logits(&img, &txt, bound.get(LOGIT_SCALE)?, self.config.max_log_scale)?;
        let loss = clip_loss(&logits)?;
        let loss_value = f64::from(loss.item()?);

        let loss_scale = self.scaler.scale;
        let mut overflow = !loss_value.is_finite();
        if !overflow {
            backward_scaled(&loss, loss_scale as f32)?;
        }
        let mut grads = bound.grads();
        drop(loss);
        if self.inject_overflow_at.contains(&attempt) {
            if let Some(g) = grads.values_mut().find(|g| !g.is_empty()) {
                g[0] = f32::INFINITY;
            }
        }
        let inv = 1.0 / loss_scale;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v = (f64::from(*v) * inv) as f32;
            }
        }
        overflow |= !all_finite(grads.values());

        let mut rec = StepRecord {
            step,
            attempt,
            loss: loss_value,
            lr: group_lrs(&self.groups, &self.schedule, step)?,
            logit_scale: 0.0,
            overflow,
            loss_scale,
            tokens: (b * trace.tokens_per_image + batch.tokens.len()) as u64,
            samples_seen: self.samples_seen,
            wall_time_ms: 0.0,
        };
        let apply = match self.scaler.update(overflow) {
            Ok(apply) => apply,
            Err(Error::Divergence { msg, .. }) => {
                rec.logit_scale = self.effective_logit_scale();
                let mut recent: Vec<StepRecord> = self.recent.iter().cloned().collect();
                recent.push(rec);
                let keep = recent.len().saturating_sub(RECENT);
                return Err(Error::Divergence {
                    msg,
                    recent: recent.split_off(keep),
                });
            }
            Err(e) => return Err(e),
        };
        if apply {
            self.optimizer.apply(&mut self.params, &grads, &lrs)?;
            clamp_scale(&mut self.params, self.config.max_log_scale);
            self.samples_seen += b as u64;
        }
        self.attempts += 1;
        rec.samples_seen = self.samples_seen;
        rec.logit_scale = self.effective_logit_scale();
        rec.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        if self.recent.len() == RECENT {
            self.recent.pop_front();
        }
        self.recent.push_back(rec.clone());
        Ok(rec)
    }

    fn effective_logit_scale(&self) -> f64 {
        let s = LogitScale {
            log_scale: self.params.log_scale().unwrap_or(0.0),
            max_log_scale: self.config.max_log_scale,
        };
        f64::from(s.effective())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                model: self.model.clone(),
                optimizer: self.optimizer.config,
                optimizer_step: self.optimizer.step,
                attempts: self.attempts,
                samples_seen: self.samples_seen,
                seed: self.config.seed,
                log_scale: self.params.log_scale().unwrap_or(0.0),
                scaler: self.scaler,
                train_config: Some(self.config.to_toml()),
            },
            params: self.params.clone(),
            moments: self.optimizer.state.clone(),
        }
    }

    /// Runs until the schedule completes, writing the step log and periodic
    /// checkpoints under `dir` when given.
    pub fn run(&mut self, dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        self.run_until(dir, |_| false)
    }

    /// Runs until the schedule completes or `stop` returns true for the
    /// latest record.
    pub fn run_until(
        &mut self,
        dir: Option<&Path>,
        mut stop: impl FnMut(&StepRecord) -> bool,
    ) -> Result<Vec<StepRecord>> {
        let mut log = match dir {
            Some(d) => Some(StepLog::open(d)?),
            None => None,
        };
        let interval = self.config.checkpoint_interval();
        let mut records = Vec::new();
        while !self.is_done() {
            let rec = self.step()?;
            if let Some(l) = log.as_mut() {
                l.append(&rec)?;
            }
            let halt = stop(&rec);
            let applied = !rec.overflow;
            records.push(rec);
            if let (Some(d), true) = (dir, applied) {
                let s = self.optimizer.step;
                if s.is_multiple_of(interval) && !self.is_done() {
                    self.checkpoint().save(&checkpoint_path(d, s))?;
                }
            }
            if halt {
                break;
            }
        }
        if let Some(l) = log.as_mut() {
            l.flush()?;
        }
        if let (Some(d), true) = (dir, self.is_done()) {
            let ck = self.checkpoint();
            ck.save(&checkpoint_path(d, self.optimizer.step))?;
            ck.save(&d.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT))?;
        }
        Ok(records)
    }

    /// Runs steps until `budget` of wall time has elapsed or the schedule
    /// completes. Returns the records produced.
    pub fn run_for(&mut self, budget: Duration) -> Result<Vec<StepRecord>> {
        let start = Instant::now();
        let mut records = Vec::new();
        while !self.is_done() && start.elapsed() < budget {
            records.push(self.step()?);
        }
        Ok(records)
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(CHECKPOINT_DIR).join(format!("step_{step:08}.cfck"))
}

/// Newline-delimited JSON step records.
pub struct StepLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl StepLog {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(STEP_LOG);
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(StepLog {
            out: BufWriter::new(f),
            path,
        })
    }

    pub fn append(&mut self, rec: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(rec).expect("records serialize");
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn read(path: &Path) -> Result<Vec<StepRecord>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    msg: e.to_string(),
                })
            })
            .collect()
    }
}

/// Contrastive loss of `model` on `batch` in evaluation mode.
pub fn eval_loss(model: &ClipModel, batch: &Batch, max_log_scale: f32) -> Result<f64> {
    let img = model.embed_images(&batch.image_tensor()?)?;
    let txt = model.embed_texts(&batch.tokens, batch.len())?;
    let bound = model.params.bind(false);
    let logits = similarity_logits(&img, &txt, bound.get(LOGIT_SCALE)?, max_log_scale)?;
    Ok(f64::from(clip_loss(&logits)?.item()?))
}
