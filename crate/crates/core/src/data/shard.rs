//! Binary shard files of image-caption records.
//!
//! Layout (little-endian): `b"CFSH"`, `u32` version, `u64` record count, then
//! per record `u32` class id, `u32` image length, image bytes (CHW, 8-bit),
//! `u32` caption length, caption bytes.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const SHARD_MAGIC: &[u8; 4] = b"CFSH";
pub const SHARD_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub class_id: u32,
    /// CHW, one byte per value.
    pub image: Vec<u8>,
    pub caption: Vec<u8>,
}

pub fn encode_shard(records: &[Record]) -> Vec<u8> {
    let body: usize = records
        .iter()
        .map(|r| 12 + r.image.len() + r.caption.len())
        .sum();
    let mut out = Vec::with_capacity(HEADER_LEN + body);
    out.extend_from_slice(SHARD_MAGIC);
    out.extend_from_slice(&SHARD_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for r in records {
        out.extend_from_slice(&r.class_id.to_le_bytes());
        out.extend_from_slice(&(r.image.len() as u32).to_le_bytes());
        out.extend_from_slice(&r.image);
        out.extend_from_slice(&(r.caption.len() as u32).to_le_bytes());
        out.extend_from_slice(&r.caption);
    }
    out
}

pub fn write_shard(records: &[Record], path: &Path) -> Result<()> {
    fs::write(path, encode_shard(records)).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corruption {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a shard held in memory; `path` is only used in error messages.
pub fn decode_shard(bytes: &[u8], path: &Path) -> Result<Vec<Record>> {
    if bytes.len() < 4 || &bytes[..4] != SHARD_MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "missing CFSH magic".into(),
        });
    }
    let mut cur = Cursor { bytes, pos: 4, path };
    let version = cur.u32("header")?;
    if version != SHARD_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("unsupported shard version {version}"),
        });
    }
    let count = u64::from_le_bytes(cur.take(8, "header")?.try_into().expect("8 bytes"));
    let mut records = Vec::with_capacity(count.min(1 << 20) as usize);
    for i in 0..count {
        let class_id = cur.u32(&format!("record {i} class id"))?;
        let n = cur.u32(&format!("record {i} image length"))? as usize;
        let image = cur.take(n, &format!("record {i} image"))?.to_vec();
        let n = cur.u32(&format!("record {i} caption length"))? as usize;
        let caption = cur.take(n, &format!("record {i} caption"))?.to_vec();
        records.push(Record {
            class_id,
            image,
            caption,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            offset: cur.pos as u64,
            msg: format!("{} trailing bytes after {count} records", bytes.len() - cur.pos),
        });
    }
    Ok(records)
}

/// Reads every record of a shard, in file order.
pub fn read_shard(path: &Path) -> Result<std::vec::IntoIter<Record>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_shard(&bytes, path)?.into_iter())
}

/// Reads several shards and concatenates their records.
pub fn read_shards(paths: &[PathBuf]) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(read_shard(p)?);
    }
    Ok(out)
}
