//! Checkpoint files.
//!
//! Layout (little-endian): `b"CFCK"`, `u32` version, `u64` metadata length,
//! metadata as JSON, `u32` tensor count, then per tensor `u32` name length,
//! name, `u32` rank, `u64` extents; finally every payload as `f32` values in
//! table order. Optimizer moments are stored as tensors named
//! `optimizer.m.<param>` and `optimizer.v.<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamStore, ParamTensor};
use crate::optim::{LossScaler, Moments, Optimizer, OptimizerConfig};
use crate::tensor::numel;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CFCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const M_PREFIX: &str = "optimizer.m.";
const V_PREFIX: &str = "optimizer.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    /// Updates applied, which is also the schedule position.
    pub optimizer_step: u64,
    /// Attempted steps including overflow skips; selects the next batch and
    /// step generator.
    pub attempts: u64,
    pub samples_seen: u64,
    pub seed: u64,
    pub log_scale: f32,
    pub scaler: LossScaler,
    /// Resolved training config (TOML) of the run that wrote the file.
    pub train_config: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub moments: BTreeMap<String, Moments>,
}

impl Checkpoint {
    /// A checkpoint of bare parameters with fresh optimizer state.
    pub fn from_params(model: ModelConfig, params: ParamStore, seed: u64) -> Self {
        let log_scale = params.log_scale().unwrap_or(crate::model::INIT_LOG_SCALE);
        Checkpoint {
            meta: CheckpointMeta {
                model,
                optimizer: OptimizerConfig::default(),
                optimizer_step: 0,
                attempts: 0,
                samples_seen: 0,
                seed,
                log_scale,
                scaler: LossScaler::default(),
                train_config: None,
            },
            params,
            moments: BTreeMap::new(),
        }
    }

    pub fn optimizer(&self) -> Result<Optimizer> {
        let mut opt = Optimizer::new(self.meta.optimizer)?;
        opt.step = self.meta.optimizer_step;
        opt.state = self.moments.clone();
        Ok(opt)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut table: Vec<(String, &[usize], &[f32])> = Vec::new();
        for (name, p) in self.params.iter() {
            table.push((name.clone(), &p.shape, &p.data));
        }
        for (name, m) in &self.moments {
            let shape = self
                .params
                .get(name)
                .map(|p| p.shape.as_slice())
                .unwrap_or(&[]);
            table.push((format!("{M_PREFIX}{name}"), shape, &m.m));
            table.push((format!("{V_PREFIX}{name}"), shape, &m.v));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(table.len() as u32).to_le_bytes());
        for (name, shape, data) in &table {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            // moments of parameters missing from the store are written flat
            let shape: Vec<usize> = if numel(shape) == data.len() && !shape.is_empty() {
                shape.to_vec()
            } else {
                vec![data.len()]
            };
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for (_, _, data) in &table {
            for v in data.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let format = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(format("missing CFCK magic".into()));
        }
        let mut cur = Reader { bytes, pos: 4, path };
        let version = cur.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = cur.u64("metadata length")? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len, "metadata")?)
            .map_err(|e| format(format!("metadata: {e}")))?;
        let count = cur.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let n = cur.u32("name length")? as usize;
            let name = String::from_utf8(cur.take(n, "name")?.to_vec())
                .map_err(|_| format(format!("tensor {i} name is not UTF-8")))?;
            let rank = cur.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(cur.u64("extent")? as usize);
            }
            entries.push((name, shape));
        }
        let mut params = ParamStore::new();
        let mut m_parts = BTreeMap::new();
        let mut v_parts = BTreeMap::new();
        for (name, shape) in entries {
            let n = numel(&shape);
            let raw = cur.take(n.saturating_mul(4), &format!("payload of {name}"))?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                m_parts.insert(p.to_string(), data);
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                v_parts.insert(p.to_string(), data);
            } else {
                params.insert(name, ParamTensor::new(shape, data)?);
            }
        }
        if cur.pos != bytes.len() {
            return Err(Error::Corruption {
                path: path.to_path_buf(),
                offset: cur.pos as u64,
                msg: "trailing bytes after payloads".into(),
            });
        }
        let mut moments = BTreeMap::new();
        for (name, m) in m_parts {
            let v = v_parts
                .remove(&name)
                .ok_or_else(|| format(format!("first moment of {name} has no second moment")))?;
            moments.insert(name, Moments { m, v });
        }
        if let Some(name) = v_parts.keys().next() {
            return Err(format(format!("second moment of {name} has no first moment")));
        }
        Ok(Checkpoint {
            meta,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corruption {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                msg: format!("truncated {what}"),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}
