//! Versioned binary container of named tensors.
//!
//! Layout (little endian): magic `CLCKPT01`, `u32` format version, `u64`
//! length + UTF-8 JSON metadata, `u32` tensor count, then per tensor:
//! `u32` name length, name bytes, `u32` rank, `u64` dims, `f64` values.
//! Tensors are written in name order, so identical contents give identical
//! bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::Value;

use super::config::MixerConfig;
use super::params::PolicyParams;
use crate::error::{Error, Result};
use crate::math::Tensor;

const MAGIC: &[u8; 8] = b"CLCKPT01";
pub const CHECKPOINT_VERSION: u32 = 1;
const PARAM_PREFIX: &str = "param.";

/// Metadata plus named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).map_err(|e| Error::Format(e.to_string()))?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let meta_bytes = take(&mut r, meta_len)?;
        let meta = serde_json::from_slice(meta_bytes).map_err(|e| Error::Format(e.to_string()))?;
        let count = read_u32(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|e| Error::Format(e.to_string()))?
                .to_string();
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = take(&mut r, numel.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Wraps policy parameters; extra tensors (optimizer state) may be added
    /// to `tensors` afterwards.
    pub fn from_policy(params: &PolicyParams, mut meta: Value) -> Result<Self> {
        let config = serde_json::to_value(params.config()).map_err(|e| Error::Format(e.to_string()))?;
        match meta.as_object_mut() {
            Some(m) => {
                m.insert("mixer".into(), config);
            }
            None => meta = serde_json::json!({ "mixer": config }),
        }
        let tensors = params
            .tensors()
            .iter()
            .map(|(k, t)| (format!("{PARAM_PREFIX}{k}"), t.clone()))
            .collect();
        Ok(Checkpoint { meta, tensors })
    }

    pub fn mixer_config(&self) -> Result<MixerConfig> {
        let v = self
            .meta
            .get("mixer")
            .ok_or_else(|| Error::Format("checkpoint has no mixer config".into()))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn policy(&self) -> Result<PolicyParams> {
        let cfg = self.mixer_config()?;
        let params = self
            .tensors
            .iter()
            .filter_map(|(k, t)| k.strip_prefix(PARAM_PREFIX).map(|n| (n.to_string(), t.clone())))
            .collect();
        PolicyParams::from_tensors(&cfg, params)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("truncated checkpoint".into()))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::Format("truncated checkpoint".into()));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
