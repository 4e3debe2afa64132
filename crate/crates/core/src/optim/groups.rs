use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Schedule;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore, IMAGE_PREFIX, LOGIT_SCALE, TEXT_PREFIX};

/// `scale_i = decay^(num_layers + 1 - i)` for depths `0..=num_layers + 1`.
pub fn layer_scales(layer_decay: f64, num_layers: usize) -> Result<Vec<f64>> {
    if !(layer_decay > 0.0 && layer_decay <= 1.0) {
        return Err(Error::config("layer_decay", format!("{layer_decay} not in (0, 1]")));
    }
    Ok((0..=num_layers + 1)
        .map(|i| layer_decay.powi((num_layers + 1 - i) as i32))
        .collect())
}

/// Depth of a tower parameter: embeddings and positional tables are 0, block
/// `i` is `i + 1`, everything after the last block is `num_layers + 1`.
pub fn param_depth(name: &str, num_layers: usize) -> usize {
    let local = name
        .strip_prefix(IMAGE_PREFIX)
        .or_else(|| name.strip_prefix(TEXT_PREFIX))
        .unwrap_or(name);
    if let Some(rest) = local.strip_prefix("blocks.") {
        if let Some(i) = rest.split('.').next().and_then(|s| s.parse::<usize>().ok()) {
            return i + 1;
        }
    }
    match local {
        "patch_embed.weight" | "patch_embed.bias" | "class_token" | "pos_embed"
        | "token_embed" => 0,
        _ => num_layers + 1,
    }
}

/// Peak rates and layer decays for the two towers. The logit scale trains at
/// the image rate without layer decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupLrs {
    pub image_lr: f64,
    pub image_layer_decay: f64,
    pub text_lr: f64,
    pub text_layer_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub members: Vec<String>,
    pub peak_lr: f64,
    pub layer_decay: f64,
    pub num_layers: usize,
    scales: Vec<f64>,
}

impl ParamGroup {
    pub fn new(
        name: impl Into<String>,
        members: Vec<String>,
        peak_lr: f64,
        layer_decay: f64,
        num_layers: usize,
    ) -> Result<Self> {
        if !(peak_lr >= 0.0) || !peak_lr.is_finite() {
            return Err(Error::config("peak_lr", format!("{peak_lr} must be finite and >= 0")));
        }
        Ok(ParamGroup {
            name: name.into(),
            members,
            peak_lr,
            layer_decay,
            num_layers,
            scales: layer_scales(layer_decay, num_layers)?,
        })
    }

    pub fn depth(&self, member: &str) -> usize {
        param_depth(member, self.num_layers)
    }

    pub fn scale(&self, member: &str) -> f64 {
        self.scales[self.depth(member)]
    }

    /// Per-depth rates at `step`, keyed `"{group}/{depth}"`.
    pub fn depth_lrs(&self, schedule: &Schedule, step: u64) -> Result<BTreeMap<String, f64>> {
        let base = schedule.lr_at(self.peak_lr, step)?;
        let mut depths: Vec<usize> = self.members.iter().map(|m| self.depth(m)).collect();
        depths.sort_unstable();
        depths.dedup();
        Ok(depths
            .into_iter()
            .map(|d| (format!("{}/{d}", self.name), base * self.scales[d]))
            .collect())
    }
}

/// Splits every parameter into the image, text and logit-scale groups.
pub fn build_groups(
    cfg: &ModelConfig,
    params: &ParamStore,
    lrs: &GroupLrs,
) -> Result<Vec<ParamGroup>> {
    let mut image = Vec::new();
    let mut text = Vec::new();
    let mut scale = Vec::new();
    for name in params.names() {
        if name.starts_with(IMAGE_PREFIX) {
            image.push(name.clone());
        } else if name.starts_with(TEXT_PREFIX) {
            text.push(name.clone());
        } else if name == LOGIT_SCALE {
            scale.push(name.clone());
        } else {
            return Err(Error::contract("build_groups", format!("{name} belongs to no group")));
        }
    }
    Ok(vec![
        ParamGroup::new("visual", image, lrs.image_lr, lrs.image_layer_decay, cfg.image.layers)?,
        ParamGroup::new("text", text, lrs.text_lr, lrs.text_layer_decay, cfg.text.layers)?,
        ParamGroup::new(LOGIT_SCALE, scale, lrs.image_lr, 1.0, 0)?,
    ])
}

/// Rate of every member tensor at `step`.
pub fn tensor_lrs(
    groups: &[ParamGroup],
    schedule: &Schedule,
    step: u64,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for g in groups {
        let base = schedule.lr_at(g.peak_lr, step)?;
        for m in &g.members {
            out.insert(m.clone(), base * g.scale(m));
        }
    }
    Ok(out)
}

/// Per-group, per-depth rates at `step`.
pub fn group_lrs(
    groups: &[ParamGroup],
    schedule: &Schedule,
    step: u64,
) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for g in groups {
        out.extend(g.depth_lrs(schedule, step)?);
    }
    Ok(out)
}
