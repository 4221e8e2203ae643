//! `VCCK` checkpoint files.
//!
//! ```text
//! "VCCK" | version u32 | meta_len u32 | meta | n_tensors u32 | tensors...
//! meta   = config_len u32 | config (TOML, UTF-8) | step u64
//!          | config_hash [32] | content_hash [32]
//! tensor = name_len u32 | name (UTF-8) | ndim u32 | dims u32 × ndim | f32 LE data
//! ```
//!
//! All integers are little-endian. `content_hash` is the SHA-256 of the
//! tensor table (everything after `meta`); `config_hash` covers the config text.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::VcModel;
use crate::autodiff::{ParamStore, Tensor};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub config_hash: [u8; 32],
    pub content_hash: [u8; 32],
    pub tensors: ParamStore<f32>,
}

impl Checkpoint {
    pub fn model<S: Scalar>(&self) -> Result<VcModel<S>> {
        VcModel::from_params(self.config.model.clone(), self.tensors.cast())
    }
}

fn tensor_table(params: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Serializes `model` with `run` as its config snapshot (the model section is
/// taken from the model itself).
pub fn checkpoint_bytes<S: Scalar>(model: &VcModel<S>, run: &RunConfig, step: u64) -> Result<Vec<u8>> {
    let mut run = run.clone();
    run.model = model.config().clone();
    let config = run.to_toml()?;
    let table = tensor_table(&model.params().cast::<f32>());
    let config_hash: [u8; 32] = Sha256::digest(config.as_bytes()).into();
    let content_hash: [u8; 32] = Sha256::digest(&table).into();

    let mut meta = Vec::new();
    meta.extend_from_slice(&(config.len() as u32).to_le_bytes());
    meta.extend_from_slice(config.as_bytes());
    meta.extend_from_slice(&step.to_le_bytes());
    meta.extend_from_slice(&config_hash);
    meta.extend_from_slice(&content_hash);

    let mut out = Vec::with_capacity(12 + meta.len() + table.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&table);
    Ok(out)
}

pub fn save_checkpoint<S: Scalar>(model: &VcModel<S>, run: &RunConfig, step: u64, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, run, step)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.origin.to_string(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(self.bytes.len(), format!("truncated checkpoint, needed {n} more bytes"))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn hash(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }
}

pub fn parse_checkpoint(bytes: &[u8], origin: &str) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, origin };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(r.fail(0, "bad checkpoint magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(4, format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()? as usize;
    let meta_start = r.pos;
    let config_len = r.u32()? as usize;
    let config_at = r.pos;
    let config_text = std::str::from_utf8(r.take(config_len)?).map_err(|_| r.fail(config_at, "config is not UTF-8"))?;
    let step = r.u64()?;
    let config_hash = r.hash()?;
    let content_hash = r.hash()?;
    if r.pos - meta_start != meta_len {
        return Err(r.fail(meta_start, "metadata length does not match its contents"));
    }
    let computed: [u8; 32] = Sha256::digest(config_text.as_bytes()).into();
    if computed != config_hash {
        return Err(r.fail(config_at, "config hash mismatch"));
    }
    let table_start = r.pos;
    let computed: [u8; 32] = Sha256::digest(&bytes[table_start..]).into();
    if computed != content_hash {
        return Err(r.fail(table_start, "tensor content hash mismatch"));
    }
    let config = RunConfig::from_toml(config_text).map_err(|e| r.fail(config_at, e.to_string()))?;

    let n = r.u32()? as usize;
    let mut tensors = ParamStore::new();
    for _ in 0..n {
        let at = r.pos;
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.fail(at, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        let raw = r.take(count * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| r.fail(at, format!("tensor `{name}`: {e}")))?;
        tensors.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, "trailing bytes after tensor table"));
    }
    Ok(Checkpoint {
        config,
        step,
        config_hash,
        content_hash,
        tensors,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    parse_checkpoint(&bytes, &path.display().to_string())
}
