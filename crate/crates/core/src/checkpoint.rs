//! Binary checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic          8 bytes   "XMAECKPT"
//! version        u32       1
//! manifest_len   u32
//! manifest       manifest_len bytes of UTF-8 JSON (see `Manifest`)
//! tensor_count   u32
//! per tensor:
//!   name_len u32, name bytes
//!   group_len u32, group bytes
//!   ndim u32, ndim x u64 dims
//!   prod(dims) x f64 payload
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"XMAECKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub framework: String,
    pub config_hash: String,
    pub step_count: u64,
    /// Freeze flag per group name.
    pub frozen: BTreeMap<String, bool>,
    /// Model configuration as JSON, so a checkpoint is self-describing.
    pub model_config: serde_json::Value,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(buf, s.len())?;
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode(store: &ParamStore, manifest: &Manifest) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    put_u32(&mut buf, json.len())?;
    buf.extend_from_slice(&json);
    put_u32(&mut buf, store.len())?;
    for p in store.iter() {
        put_str(&mut buf, &p.name)?;
        put_str(&mut buf, p.group.as_str())?;
        put_u32(&mut buf, p.tensor.shape().len())?;
        for d in p.tensor.shape() {
            buf.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in p.tensor.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated archive at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamStore, Manifest)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mlen = r.u32()?;
    let manifest: Manifest =
        serde_json::from_slice(r.take(mlen)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let gname = r.string()?;
        let group = ParamGroup::parse(&gname)
            .ok_or_else(|| Error::Checkpoint(format!("unknown group `{gname}`")))?;
        let ndim = r.u32()?;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.add(name, group, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    for (g, frozen) in &manifest.frozen {
        let group = ParamGroup::parse(g)
            .ok_or_else(|| Error::Checkpoint(format!("unknown group `{g}` in manifest")))?;
        store.set_frozen(group, *frozen);
    }
    Ok((store, manifest))
}

pub fn save(path: &Path, store: &ParamStore, manifest: &Manifest) -> Result<()> {
    let bytes = encode(store, manifest)?;
    crate::harness::write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<(ParamStore, Manifest)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Freeze flags of every group present in `store`.
pub fn freeze_flags(store: &ParamStore) -> BTreeMap<String, bool> {
    store
        .groups()
        .into_iter()
        .map(|g| (g.as_str().to_string(), store.is_frozen(g)))
        .collect()
}
