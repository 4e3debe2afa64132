use serde::Serialize;

use super::config::InitPolicy;
use crate::error::{Error, Result};
use crate::model::{interpolate_pos_embed, ModelConfig, ParamStore, IMAGE_PREFIX};

const IMAGE_POS: &str = "visual.pos_embed";

/// Outcome for every parameter of the target model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct InitReport {
    /// Copied unchanged.
    pub loaded: Vec<String>,
    /// Positional tables resampled to the target grid.
    pub resampled: Vec<String>,
    /// Absent from the checkpoint; kept freshly initialized.
    pub missing: Vec<String>,
    /// Present with an incompatible shape; kept freshly initialized.
    pub mismatched: Vec<String>,
    /// Outside the policy's scope; kept freshly initialized.
    pub skipped: Vec<String>,
}

impl InitReport {
    pub fn fresh(&self) -> Vec<&String> {
        self.missing
            .iter()
            .chain(&self.mismatched)
            .chain(&self.skipped)
            .collect()
    }
}

fn in_scope(name: &str, policy: InitPolicy) -> bool {
    match policy {
        InitPolicy::Scratch => false,
        InitPolicy::ImageFromCheckpoint => name.starts_with(IMAGE_PREFIX),
        InitPolicy::BothFromCheckpoint => true,
    }
}

fn square_grid(rows: usize) -> Option<usize> {
    let g = ((rows.saturating_sub(1)) as f64).sqrt().round() as usize;
    (rows >= 1 && g * g + 1 == rows).then_some(g)
}

/// Overwrites `params` (already initialized for `cfg`) with matching tensors
/// from `source`. Under `strict`, any in-scope tensor that cannot be used is
/// an error and `params` is left untouched.
pub fn init_from_checkpoint(
    params: &mut ParamStore,
    cfg: &ModelConfig,
    source: &ParamStore,
    policy: InitPolicy,
    strict: bool,
) -> Result<InitReport> {
    params.validate(cfg)?;
    let mut report = InitReport::default();
    let mut updates = Vec::new();
    for (name, target) in params.iter() {
        if !in_scope(name, policy) {
            report.skipped.push(name.clone());
            continue;
        }
        let Some(src) = source.get(name) else {
            if strict {
                return Err(Error::MissingParam(name.clone()));
            }
            report.missing.push(name.clone());
            continue;
        };
        if src.shape == target.shape {
            updates.push((name.clone(), src.clone()));
            report.loaded.push(name.clone());
            continue;
        }
        let resample = name == IMAGE_POS
            && src.shape.len() == 2
            && src.shape[1] == target.shape[1]
            && square_grid(src.shape[0]).is_some();
        if resample {
            let new_grid = cfg.image.grid();
            updates.push((name.clone(), interpolate_pos_embed(src, new_grid)?));
            report.resampled.push(name.clone());
            continue;
        }
        if strict {
            return Err(Error::ParamShape {
                name: name.clone(),
                expected: target.shape.clone(),
                found: src.shape.clone(),
            });
        }
        report.mismatched.push(name.clone());
    }
    for (name, t) in updates {
        params.insert(name, t);
    }
    Ok(report)
}
