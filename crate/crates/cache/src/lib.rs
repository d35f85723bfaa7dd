//! Feature cache file format.
//!
//! ```text
//! magic      7 bytes  "PPMCACH"
//! version    u16
//! dim        u32
//! count      u64
//! encoder    32 bytes  hash of the encoders that produced the vectors
//! index      count x (item_id u64, offset u64), sorted by item_id
//! vectors    count x dim x f32
//! crc32      u32 over every preceding byte
//! ```
//!
//! All integers and floats are little-endian. `offset` is the absolute byte
//! position of the vector in the file.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub const MAGIC: &[u8; 7] = b"PPMCACH";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 7 + 2 + 4 + 8 + 32;
const INDEX_ENTRY_LEN: usize = 16;
const CRC_LEN: usize = 4;

pub type EncoderVersion = [u8; 32];

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cannot build an empty cache")]
    Empty,
    #[error("duplicate item id {0}")]
    Duplicate(u64),
    #[error("item {item_id} has dimension {actual}, expected {expected}")]
    Dimension { item_id: u64, expected: usize, actual: usize },
    #[error("entries disagree on encoder version")]
    MixedVersions,
    #[error("item {0} not in cache")]
    Miss(u64),
    #[error("encoder version mismatch: cache {cache}, encoders {encoders}")]
    VersionMismatch { cache: String, encoders: String },
    #[error("corrupt cache: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("feature source failed: {0}")]
    Source(String),
}

pub type Result<T, E = CacheError> = std::result::Result<T, E>;

pub fn hex(version: &EncoderVersion) -> String {
    version.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModalFeatureEntry {
    pub item_id: u64,
    pub feature: Vec<f32>,
    pub encoder_version: EncoderVersion,
}

/// Serializes entries into the cache format. Output depends only on the set
/// of entries, not their order.
pub fn encode(entries: &[ModalFeatureEntry]) -> Result<Vec<u8>> {
    let first = entries.first().ok_or(CacheError::Empty)?;
    let dim = first.feature.len();
    let version = first.encoder_version;
    let mut sorted: Vec<&ModalFeatureEntry> = entries.iter().collect();
    sorted.sort_by_key(|e| e.item_id);
    for w in sorted.windows(2) {
        if w[0].item_id == w[1].item_id {
            return Err(CacheError::Duplicate(w[0].item_id));
        }
    }
    for e in &sorted {
        if e.feature.len() != dim {
            return Err(CacheError::Dimension { item_id: e.item_id, expected: dim, actual: e.feature.len() });
        }
        if e.encoder_version != version {
            return Err(CacheError::MixedVersions);
        }
    }

    let n = sorted.len();
    let mut out = Vec::with_capacity(file_size(n, dim));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    out.extend_from_slice(&version);
    let data_start = HEADER_LEN + n * INDEX_ENTRY_LEN;
    for (i, e) in sorted.iter().enumerate() {
        out.extend_from_slice(&e.item_id.to_le_bytes());
        out.extend_from_slice(&((data_start + i * dim * 4) as u64).to_le_bytes());
    }
    for e in &sorted {
        for v in &e.feature {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Exact size in bytes of a cache holding `count` vectors of `dim` floats.
pub fn file_size(count: usize, dim: usize) -> usize {
    HEADER_LEN + count * INDEX_ENTRY_LEN + count * dim * 4 + CRC_LEN
}

pub fn build_cache(path: &Path, entries: &[ModalFeatureEntry]) -> Result<()> {
    let bytes = encode(entries)?;
    std::fs::write(path, bytes).map_err(|source| CacheError::Io { path: path.display().to_string(), source })
}

/// Lookup behavior on a miss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    /// A miss is an error.
    #[default]
    Strict,
    /// A miss yields the zero vector and is counted.
    Lenient,
}

/// Anything that can compute modal features on the fly.
pub trait FeatureSource {
    fn encoder_version(&self) -> EncoderVersion;
    fn dim(&self) -> usize;
    /// Features for `item_ids`, in the same order.
    fn compute(&self, item_ids: &[u64]) -> Result<Vec<Vec<f32>>>;
}

/// An opened, validated cache. Safe to share between threads.
#[derive(Debug)]
pub struct FeatureCache {
    dim: usize,
    encoder_version: EncoderVersion,
    ids: Vec<u64>,
    values: Vec<f32>,
    mode: Mode,
    misses: AtomicU64,
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().unwrap())
}

impl FeatureCache {
    pub fn open(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CacheError::Io { path: path.display().to_string(), source })?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: &str| CacheError::Corrupt(m.to_string());
        if bytes.len() < HEADER_LEN + CRC_LEN {
            return Err(corrupt("file too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - CRC_LEN);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        if &body[..7] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u16::from_le_bytes([body[7], body[8]]);
        if version != FORMAT_VERSION {
            return Err(CacheError::Corrupt(format!("unsupported format version {version}")));
        }
        let dim = u32::from_le_bytes(body[9..13].try_into().unwrap()) as usize;
        let count = u64_at(body, 13) as usize;
        let encoder_version: EncoderVersion = body[21..53].try_into().unwrap();
        if bytes.len() != file_size(count, dim) {
            return Err(corrupt("length disagrees with header"));
        }
        let mut ids = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count * dim);
        for i in 0..count {
            let at = HEADER_LEN + i * INDEX_ENTRY_LEN;
            let id = u64_at(body, at);
            let offset = u64_at(body, at + 8) as usize;
            if ids.last().is_some_and(|&prev| prev >= id) {
                return Err(corrupt("index not strictly sorted"));
            }
            if offset + dim * 4 > body.len() || offset < HEADER_LEN + count * INDEX_ENTRY_LEN {
                return Err(corrupt("offset out of range"));
            }
            ids.push(id);
            values.extend(
                body[offset..offset + dim * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap())),
            );
        }
        Ok(FeatureCache { dim, encoder_version, ids, values, mode: Mode::Strict, misses: AtomicU64::new(0) })
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn encoder_version(&self) -> EncoderVersion {
        self.encoder_version
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn contains(&self, item_id: u64) -> bool {
        self.ids.binary_search(&item_id).is_ok()
    }

    /// Stored vector for `item_id`, borrowed. `None` on a miss, without counting it.
    pub fn lookup(&self, item_id: u64) -> Option<&[f32]> {
        let i = self.ids.binary_search(&item_id).ok()?;
        Some(&self.values[i * self.dim..(i + 1) * self.dim])
    }

    pub fn get(&self, item_id: u64) -> Result<Vec<f32>> {
        match self.lookup(item_id) {
            Some(v) => Ok(v.to_vec()),
            None => match self.mode {
                Mode::Strict => Err(CacheError::Miss(item_id)),
                Mode::Lenient => {
                    self.misses.fetch_add(1, Ordering::Relaxed);
                    Ok(vec![0.0; self.dim])
                }
            },
        }
    }

    pub fn read_all(&self) -> Vec<ModalFeatureEntry> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, &item_id)| ModalFeatureEntry {
                item_id,
                feature: self.values[i * self.dim..(i + 1) * self.dim].to_vec(),
                encoder_version: self.encoder_version,
            })
            .collect()
    }

    /// Recomputes every cached vector with `source` and returns the largest
    /// absolute difference.
    pub fn verify_against<S: FeatureSource + ?Sized>(&self, source: &S) -> Result<f64> {
        let theirs = source.encoder_version();
        if theirs != self.encoder_version {
            return Err(CacheError::VersionMismatch { cache: hex(&self.encoder_version), encoders: hex(&theirs) });
        }
        let fresh = source.compute(&self.ids)?;
        let mut worst = 0.0f64;
        for (i, v) in fresh.iter().enumerate() {
            if v.len() != self.dim {
                return Err(CacheError::Dimension { item_id: self.ids[i], expected: self.dim, actual: v.len() });
            }
            for (a, b) in v.iter().zip(&self.values[i * self.dim..(i + 1) * self.dim]) {
                worst = worst.max((*a as f64 - *b as f64).abs());
            }
        }
        Ok(worst)
    }
}
