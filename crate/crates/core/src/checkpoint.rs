//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "LAMPCKPT" | u32 format version | str module tag | str corpus-stats hash
//! | str config JSON | str extra JSON | u32 tensor count
//! | per tensor: str name | u8 dtype | u32 rank | u64 dims[rank] | raw data
//! ```
//!
//! `str` is a `u32` byte length followed by UTF-8 bytes. Tensors are written in name order,
//! so save → load → save reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LAMPCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub module: String,
    pub stats_hash: String,
    pub config: serde_json::Value,
    pub extra: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(module: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            module: module.to_string(),
            stats_hash: String::new(),
            config: serde_json::to_value(config)?,
            extra: serde_json::Value::Null,
            tensors: BTreeMap::new(),
        })
    }

    pub fn config_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn extra_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.extra.clone())?)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("{} checkpoint lacks tensor `{name}`", self.module)))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_str(&mut out, &self.module);
        put_str(&mut out, &self.stats_hash);
        put_str(&mut out, &serde_json::to_string(&self.config)?);
        put_str(&mut out, &serde_json::to_string(&self.extra)?);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            let t = t.flatten_all()?;
            let (tag, data): (u8, Vec<u8>) = match t.dtype() {
                DType::F32 => (0, t.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
                DType::F64 => (1, t.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
                DType::U32 => (2, t.to_vec1::<u32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
                other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
            };
            let dims = self.tensors[name].dims();
            out.push(tag);
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            out.extend_from_slice(&data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let module = r.string()?;
        let stats_hash = r.string()?;
        let config = serde_json::from_str(&r.string()?)?;
        let extra = serde_json::from_str(&r.string()?)?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name = r.string()?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let t = match tag {
                0 => {
                    let v = r.take(4 * n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                1 => {
                    let v = r.take(8 * n)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                2 => {
                    let v = r.take(4 * n)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
            };
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { module, stats_hash, config, extra, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and checks its module tag.
    pub fn load(path: &Path, module: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::CheckpointMissing(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck = Self::from_bytes(&bytes)?;
        if ck.module != module {
            return Err(Error::Checkpoint(format!(
                "{} holds a `{}` checkpoint, expected `{module}`",
                path.display(),
                ck.module
            )));
        }
        Ok(ck)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}
