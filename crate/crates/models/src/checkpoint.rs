//! Named-tensor checkpoints.
//!
//! ```text
//! magic     7 bytes ("PPMCKPT", "URMCKPT" or "ENCCKPT")
//! version   u16
//! count     u32
//! count x { name_len u16, name utf-8, rank u8, dims u32 x rank, values f32 x prod(dims) }
//! meta_len  u32, metadata as JSON
//! crc32     u32 over every preceding byte
//! ```
//! Little-endian throughout.

use std::collections::BTreeSet;
use std::path::Path;

use ppm_core::{ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ModelError, Result};

pub const PPM_MAGIC: &[u8; 7] = b"PPMCKPT";
pub const URM_MAGIC: &[u8; 7] = b"URMCKPT";
pub const ENCODER_MAGIC: &[u8; 7] = b"ENCCKPT";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    /// sha256 of the serialized training config.
    pub config_hash: String,
    /// Which data the weights were fitted on, e.g. `train/days-1-11`.
    pub window: String,
    pub steps: u64,
    /// Hash of the checkpoint this one was initialized from, if any.
    pub parent: Option<String>,
    /// Hash of the encoders whose features the model consumed.
    pub encoder_version: Option<String>,
    /// Hash of the PPM checkpoint loaded into the plug-in branch.
    #[serde(default)]
    pub plugin: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub magic: [u8; 7],
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub metadata: Metadata,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash<C: Serialize>(config: &C) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    /// Copies every parameter of `store` accepted by `keep`, in store order.
    pub fn from_store<T: Scalar>(
        magic: &[u8; 7],
        store: &ParamStore<T>,
        keep: impl Fn(&str) -> bool,
        metadata: Metadata,
    ) -> Self {
        let tensors = store
            .iter()
            .filter(|(_, p)| keep(&p.name))
            .map(|(_, p)| (p.name.clone(), p.value.cast::<f32>()))
            .collect();
        Checkpoint { magic: *magic, tensors, metadata }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 7 + 2 + 4 + 4 + 4 {
            return Err(corrupt("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader { bytes: body, at: 0 };
        let magic: [u8; 7] = r.take(7)?.try_into().unwrap();
        if ![PPM_MAGIC, URM_MAGIC, ENCODER_MAGIC].contains(&&magic) {
            return Err(corrupt("unknown magic"));
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| corrupt("name is not utf-8"))?.to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = r
                .take(numel.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?).map_err(|e| corrupt(format!("metadata: {e}")))?;
        if r.at != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Checkpoint { magic, tensors, metadata })
    }

    /// Hex sha256 of the serialized checkpoint; used as its identity.
    pub fn hash(&self) -> String {
        sha256_hex(&self.to_bytes())
    }

    /// Writes the checkpoint and returns its hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_magic(&self, magic: &[u8; 7]) -> Result<()> {
        if &self.magic != magic {
            return Err(ModelError::Mismatch(format!(
                "expected a {} checkpoint, found {}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&self.magic)
            )));
        }
        Ok(())
    }

    /// Writes every checkpoint tensor accepted by `keep` into the parameter
    /// of the same name. All offending names are listed if any tensor is
    /// missing from the store or has the wrong shape, or if a store
    /// parameter accepted by `keep` has no tensor; nothing is written then.
    pub fn load_into<T: Scalar>(&self, store: &mut ParamStore<T>, keep: impl Fn(&str) -> bool) -> Result<usize> {
        let mut problems = Vec::new();
        let mut seen = BTreeSet::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| keep(n)) {
            seen.insert(name.as_str());
            match store.by_name(name) {
                Err(_) => problems.push(format!("{name} (not in model)")),
                Ok(p) if p.value.shape() != t.shape() => {
                    problems.push(format!("{name} (shape {:?} vs {:?})", t.shape(), p.value.shape()))
                }
                Ok(_) => {}
            }
        }
        for (_, p) in store.iter() {
            if keep(&p.name) && !seen.contains(p.name.as_str()) {
                problems.push(format!("{} (not in checkpoint)", p.name));
            }
        }
        if !problems.is_empty() {
            return Err(ModelError::Mismatch(problems.join(", ")));
        }
        for name in &seen {
            let id = store.id(name)?;
            store.set_value(id, self.tensor(name).expect("seen").cast())?;
        }
        Ok(seen.len())
    }
}
