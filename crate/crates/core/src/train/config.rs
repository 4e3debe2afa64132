use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::MAX_LOG_SCALE;
use crate::model::{ImageEncoderConfig, ModelConfig, TextEncoderConfig};
use crate::optim::{
    GroupLrs, OptimizerConfig, OptimizerKind, ScalerConfig, Schedule, ScheduleShape,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitPolicy {
    Scratch,
    ImageFromCheckpoint,
    BothFromCheckpoint,
}

/// Flat training configuration. Every key carries its unit where one applies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub image_layers: usize,
    pub image_width: usize,
    pub image_heads: usize,
    pub image_mlp_ratio: usize,
    pub image_size_px: usize,
    pub patch_size_px: usize,
    pub image_channels: usize,
    pub drop_path_rate: f32,
    pub text_layers: usize,
    pub text_width: usize,
    pub text_heads: usize,
    pub text_mlp_ratio: usize,
    pub vocab_size: usize,
    pub context_length_tokens: usize,
    pub embed_dim: usize,

    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub image_peak_lr: f64,
    pub image_layer_decay: f64,
    pub text_peak_lr: f64,
    pub text_layer_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub schedule: ScheduleShape,
    pub max_log_scale: f32,

    pub loss_scale_init: f64,
    pub loss_scale_growth_interval_steps: u64,
    pub loss_scale_growth_factor: f64,
    pub loss_scale_backoff_factor: f64,

    pub mask_ratio: f64,
    pub batch_size: usize,
    /// Random-resized-crop area range; `crop_scale_min = 1` disables cropping.
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    pub seed: u64,

    pub data_manifest: PathBuf,
    pub init_policy: InitPolicy,
    pub init_checkpoint: Option<PathBuf>,
    /// Unmatched tensors are errors when set, freshly initialized otherwise.
    pub init_strict: bool,
    /// 0 selects every 10% of `total_steps`.
    pub checkpoint_interval_steps: u64,
    /// 0 reads batches synchronously on the training thread.
    pub prefetch_depth: usize,

    /// Steps of the prior run whose checkpoint initializes the ablation arms.
    pub ablation_prior_steps: u64,
    /// Wall-clock budget per arm of the equal-time masking comparison.
    pub ablation_wallclock_secs: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::b16_shrunk();
        let o = OptimizerConfig::default();
        let s = ScalerConfig::default();
        TrainConfig {
            image_layers: m.image.layers,
            image_width: m.image.width,
            image_heads: m.image.heads,
            image_mlp_ratio: m.image.mlp_ratio,
            image_size_px: m.image.image_size,
            patch_size_px: m.image.patch_size,
            image_channels: m.image.channels,
            drop_path_rate: m.image.drop_path,
            text_layers: m.text.layers,
            text_width: m.text.width,
            text_heads: m.text.heads,
            text_mlp_ratio: m.text.mlp_ratio,
            vocab_size: m.text.vocab_size,
            context_length_tokens: m.text.context_length,
            embed_dim: m.embed_dim,
            optimizer: o.kind,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            image_peak_lr: 2e-4,
            image_layer_decay: 0.75,
            text_peak_lr: 2e-5,
            text_layer_decay: 0.85,
            warmup_steps: 2000,
            total_steps: 20_000,
            schedule: ScheduleShape::Cosine,
            max_log_scale: MAX_LOG_SCALE,
            loss_scale_init: s.init_scale,
            loss_scale_growth_interval_steps: s.growth_interval,
            loss_scale_growth_factor: s.growth_factor,
            loss_scale_backoff_factor: s.backoff_factor,
            mask_ratio: 0.5,
            batch_size: 64,
            crop_scale_min: 0.9,
            crop_scale_max: 1.0,
            seed: 0,
            data_manifest: PathBuf::from("data/manifest.toml"),
            init_policy: InitPolicy::Scratch,
            init_checkpoint: None,
            init_strict: true,
            checkpoint_interval_steps: 0,
            prefetch_depth: 0,
            ablation_prior_steps: 0,
            ablation_wallclock_secs: 20.0,
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_override_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(value.into())),
        Err(_) => toml::Value::String(value.into()),
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            Error::config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    /// Applies `key=value` overrides on top of the parsed file.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(&self.to_toml()).expect("round trip of own serialization");
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like key=value"))?;
            let k = k.trim();
            let probe = toml::Table::from_iter([(k.to_string(), parse_override_value(v.trim()))]);
            let mut merged = table.clone();
            merged.extend(probe);
            toml::Value::Table(merged.clone())
                .try_into::<TrainConfig>()
                .map_err(|e| Error::config(k, e.message().to_string()))?;
            table = merged;
        }
        let cfg: TrainConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::config("override", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            image: ImageEncoderConfig {
                layers: self.image_layers,
                width: self.image_width,
                heads: self.image_heads,
                mlp_ratio: self.image_mlp_ratio,
                image_size: self.image_size_px,
                patch_size: self.patch_size_px,
                channels: self.image_channels,
                drop_path: self.drop_path_rate,
            },
            text: TextEncoderConfig {
                layers: self.text_layers,
                width: self.text_width,
                heads: self.text_heads,
                mlp_ratio: self.text_mlp_ratio,
                vocab_size: self.vocab_size,
                context_length: self.context_length_tokens,
            },
            embed_dim: self.embed_dim,
        }
    }

    pub fn set_model(&mut self, m: &ModelConfig) {
        self.image_layers = m.image.layers;
        self.image_width = m.image.width;
        self.image_heads = m.image.heads;
        self.image_mlp_ratio = m.image.mlp_ratio;
        self.image_size_px = m.image.image_size;
        self.patch_size_px = m.image.patch_size;
        self.image_channels = m.image.channels;
        self.drop_path_rate = m.image.drop_path;
        self.text_layers = m.text.layers;
        self.text_width = m.text.width;
        self.text_heads = m.text.heads;
        self.text_mlp_ratio = m.text.mlp_ratio;
        self.vocab_size = m.text.vocab_size;
        self.context_length_tokens = m.text.context_length;
        self.embed_dim = m.embed_dim;
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            kind: self.optimizer,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup_steps: self.warmup_steps,
            total_steps: self.total_steps,
            shape: self.schedule,
        }
    }

    pub fn group_lrs(&self) -> GroupLrs {
        GroupLrs {
            image_lr: self.image_peak_lr,
            image_layer_decay: self.image_layer_decay,
            text_lr: self.text_peak_lr,
            text_layer_decay: self.text_layer_decay,
        }
    }

    pub fn scaler_config(&self) -> ScalerConfig {
        ScalerConfig {
            init_scale: self.loss_scale_init,
            growth_interval: self.loss_scale_growth_interval_steps,
            growth_factor: self.loss_scale_growth_factor,
            backoff_factor: self.loss_scale_backoff_factor,
        }
    }

    pub fn crop(&self) -> Option<(f64, f64)> {
        (self.crop_scale_min < 1.0).then_some((self.crop_scale_min, self.crop_scale_max))
    }

    /// Samples the full schedule consumes.
    pub fn total_samples(&self) -> u64 {
        self.total_steps * self.batch_size as u64
    }

    pub fn checkpoint_interval(&self) -> u64 {
        if self.checkpoint_interval_steps > 0 {
            self.checkpoint_interval_steps
        } else {
            self.total_steps.div_ceil(10).max(1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.optimizer_config().validate()?;
        self.schedule().validate()?;
        crate::optim::layer_scales(self.image_layer_decay, 0)
            .map_err(|_| Error::config("image_layer_decay", "must lie in (0, 1]"))?;
        crate::optim::layer_scales(self.text_layer_decay, 0)
            .map_err(|_| Error::config("text_layer_decay", "must lie in (0, 1]"))?;
        crate::optim::LossScaler::new(self.scaler_config())?;
        for (field, v) in [("image_peak_lr", self.image_peak_lr), ("text_peak_lr", self.text_peak_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio", format!("{} not in [0, 1)", self.mask_ratio)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be positive"));
        }
        if !(self.crop_scale_min > 0.0
            && self.crop_scale_min <= self.crop_scale_max
            && self.crop_scale_max <= 1.0)
        {
            return Err(Error::config("crop_scale_min", "need 0 < min <= max <= 1"));
        }
        if !(self.ablation_wallclock_secs > 0.0) {
            return Err(Error::config("ablation_wallclock_secs", "must be positive"));
        }
        Ok(())
    }
}
