//! Binary checkpoint files.
//!
//! Layout, all integers little-endian `u32`:
//! magic `CMAD`, version, 32-byte SHA-256 of the canonical model config,
//! config text length and bytes, record count, then per record: id length,
//! id bytes, ndim, dims, and `f64` LE values. Online parameters are stored
//! under `online/`, the EMA set under `target/`.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Architecture, ConsistencyModel, ModelConfig, Which};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMAD";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated checkpoint while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

pub fn config_digest(cfg: &ModelConfig) -> [u8; 32] {
    Sha256::digest(cfg.canonical().as_bytes()).into()
}

impl ConsistencyModel {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION as usize)?;
        let text = self.config.canonical();
        out.extend_from_slice(&config_digest(&self.config));
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.online.len() + self.target.len())?;
        for (prefix, which) in [("online/", Which::Online), ("target/", Which::Target)] {
            for (_, p) in self.params(which).iter() {
                let id = format!("{prefix}{}", p.id());
                put_u32(&mut out, id.len())?;
                out.extend_from_slice(id.as_bytes());
                put_u32(&mut out, p.value().shape().len())?;
                for &d in p.value().shape() {
                    put_u32(&mut out, d)?;
                }
                for v in p.value().data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint, rebuilding the architecture from its embedded
    /// config. With `expected`, the embedded config must match it.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic, expected CMAD".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION as usize {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let digest: [u8; 32] = r.take(32, "config digest")?.try_into().expect("32 bytes");
        let text_len = r.u32("config length")?;
        let text = std::str::from_utf8(r.take(text_len, "config")?)
            .map_err(|_| Error::Checkpoint("config header is not UTF-8".into()))?;
        let stored = ModelConfig::from_canonical(text)?;
        if config_digest(&stored) != digest {
            return Err(Error::Checkpoint("config digest does not match embedded config".into()));
        }
        let cfg = expected.cloned().unwrap_or_else(|| stored.clone());
        let (arch, mut online) = Architecture::build(&cfg, None);
        let mut target = online.clone();
        let count = r.u32("record count")?;
        if count != online.len() + target.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {count} parameters, model expects {}",
                online.len() + target.len()
            )));
        }
        read_set(&mut r, &mut online, "online")?;
        read_set(&mut r, &mut target, "target")?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after the last record",
                bytes.len() - r.pos
            )));
        }
        if let Some(exp) = expected {
            if *exp != stored {
                return Err(Error::Checkpoint(format!(
                    "checkpoint config differs from the requested model config:\n{}vs\n{}",
                    stored.canonical(),
                    exp.canonical()
                )));
            }
        }
        Ok(ConsistencyModel::from_parts(cfg, arch, online, target))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }
}

fn read_set(r: &mut Reader<'_>, set: &mut ParamSet, prefix: &str) -> Result<()> {
    let ids: Vec<_> = set.ids().collect();
    for id in ids {
        let id_len = r.u32("parameter id length")?;
        let name = std::str::from_utf8(r.take(id_len, "parameter id")?)
            .map_err(|_| Error::Checkpoint("parameter id is not UTF-8".into()))?
            .to_string();
        let (pfx, rest) = name
            .split_once('/')
            .ok_or_else(|| Error::Checkpoint(format!("parameter id {name:?} lacks a set prefix")))?;
        let param = set.get_mut(id);
        if pfx != prefix || rest != param.id() {
            return Err(Error::Checkpoint(format!(
                "expected parameter {prefix}/{}, found {name}",
                param.id()
            )));
        }
        let ndim = r.u32(&format!("ndim of {name}"))?;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&format!("shape of {name}"))?);
        }
        if shape != param.value().shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for parameter {name}: file has {shape:?}, model expects {:?}",
                param.value().shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, &format!("values of {name}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        *param.value_mut() = Tensor::new(shape, data)?;
    }
    Ok(())
}
