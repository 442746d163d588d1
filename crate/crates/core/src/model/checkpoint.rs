//! Versioned checkpoint archive.
//!
//! Layout: the magic `RPCK1`, a little-endian `u64` metadata length, the JSON
//! metadata record, then the tensor blob. Each blob entry is a `u32` name length,
//! the UTF-8 name, a `u8` dtype length and dtype string (always `f32`), a `u32`
//! rank, `u64` dimensions, and the little-endian values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DenoiserConfig, DenoiserParameters};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RPCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: DenoiserConfig,
    pub step: u64,
    /// Fingerprints of the datasets the weights were trained on.
    pub dataset_fingerprints: Vec<String>,
    /// Metric history, one record per logged step.
    pub metrics: Vec<serde_json::Value>,
    /// Free-form provenance such as the training configuration hash.
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    pub blob_len: u64,
    pub blob_sha256: String,
}

/// Weights plus metadata and optional auxiliary tensors (optimizer moments).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: DenoiserParameters<f32>,
    pub aux: Vec<(String, Tensor<f32>)>,
}

const AUX_PREFIX: &str = "aux.";

impl Checkpoint {
    pub fn new(params: DenoiserParameters<f32>, step: u64) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                config: params.config,
                step,
                dataset_fingerprints: Vec::new(),
                metrics: Vec::new(),
                labels: BTreeMap::new(),
                blob_len: 0,
                blob_sha256: String::new(),
            },
            params,
            aux: Vec::new(),
        }
    }

    pub fn aux_tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.aux.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Serialized archive. The blob length and digest in `meta` are recomputed.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut blob = Vec::new();
        let mut put = |name: &str, t: &Tensor<f32>| {
            blob.extend_from_slice(&(name.len() as u32).to_le_bytes());
            blob.extend_from_slice(name.as_bytes());
            blob.push(3);
            blob.extend_from_slice(b"f32");
            blob.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                blob.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (name, t) in self.params.named_tensors() {
            put(&name, t);
        }
        for (name, t) in &self.aux {
            put(&format!("{AUX_PREFIX}{name}"), t);
        }
        let mut meta = self.meta.clone();
        meta.config = self.params.config;
        meta.blob_len = blob.len() as u64;
        meta.blob_sha256 = hex::encode(Sha256::digest(&blob));
        let meta = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + meta.len() + blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&blob);
        Ok(out)
    }
}

struct Reader<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("checkpoint ends inside {what}")))?;
        let s = &self.data[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses an archive, verifying magic, length, digest and every tensor shape.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let n = CHECKPOINT_MAGIC.len().min(bytes.len());
    if &bytes[..n] != &CHECKPOINT_MAGIC[..n] {
        return Err(Error::Version {
            expected: String::from_utf8_lossy(CHECKPOINT_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..n]).into_owned(),
        });
    }
    let mut r = Reader { data: bytes, at: 0 };
    r.take(CHECKPOINT_MAGIC.len(), "magic")?;
    let meta_len = r.u64("metadata length")? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
    let blob = &bytes[r.at..];
    if (blob.len() as u64) < meta.blob_len {
        return Err(Error::Truncated(format!("tensor blob has {} of {} bytes", blob.len(), meta.blob_len)));
    }
    if blob.len() as u64 > meta.blob_len {
        return Err(Error::Integrity(format!("{} trailing bytes after tensor blob", blob.len() as u64 - meta.blob_len)));
    }
    if hex::encode(Sha256::digest(blob)) != meta.blob_sha256 {
        return Err(Error::Integrity("tensor blob digest does not match metadata".into()));
    }

    let mut tensors = BTreeMap::new();
    let mut r = Reader { data: blob, at: 0 };
    while r.at < blob.len() {
        let name_len = r.u32("tensor name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let dtype_len = r.take(1, "dtype length")?[0] as usize;
        let dtype = r.take(dtype_len, "dtype")?;
        if dtype != b"f32" {
            return Err(Error::Format(format!("tensor {name}: unsupported dtype {}", String::from_utf8_lossy(dtype))));
        }
        let rank = r.u32("tensor rank")? as usize;
        let shape = (0..rank).map(|_| r.u64("tensor shape").map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = r.take(count * 4, "tensor data")?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.insert(name, Tensor { shape, data });
    }

    let mut params = DenoiserParameters::<f32>::init(meta.config, &mut seed::rng(0, &[]))?;
    let mut failure = None;
    params.for_each_mut(|name, slot| {
        if failure.is_some() {
            return;
        }
        match tensors.remove(name) {
            None => failure = Some(Error::Format(format!("missing tensor {name}"))),
            Some(t) if t.shape != slot.shape => {
                failure = Some(Error::TensorShape { name: name.to_string(), expected: slot.shape.clone(), found: t.shape })
            }
            Some(t) => *slot = t,
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let mut aux = Vec::new();
    for (name, t) in tensors {
        match name.strip_prefix(AUX_PREFIX) {
            Some(short) => aux.push((short.to_string(), t)),
            None => return Err(Error::Format(format!("unexpected tensor {name}"))),
        }
    }
    Ok(Checkpoint { meta, params, aux })
}

/// Writes atomically through a temporary sibling file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.encode()?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint and, when `expected` is given, checks that its
/// architecture and injection strategy match.
pub fn load_checkpoint(path: &Path, expected: Option<&DenoiserConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = read_checkpoint(&bytes)?;
    if let Some(cfg) = expected {
        cfg.ensure_compatible(&ckpt.meta.config)?;
    }
    Ok(ckpt)
}
