//! Read access to modal feature vectors, from memory or from a cache file.

use ppm_cache::{CacheError, FeatureCache, ModalFeatureEntry, Mode};

use crate::error::{ModelError, Result};

pub trait FeatureLookup {
    fn dim(&self) -> usize;
    /// Appends the feature of `item_id` to `out`.
    fn append(&self, item_id: u32, out: &mut Vec<f32>) -> Result<()>;

    /// Row-major `[ids.len() x dim]` matrix of features.
    fn gather(&self, ids: &[u32]) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(ids.len() * self.dim());
        for &id in ids {
            self.append(id, &mut out)?;
        }
        Ok(out)
    }
}

/// Dense in-memory table indexed by item id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    values: Vec<f32>,
    present: Vec<bool>,
}

impl FeatureTable {
    pub fn from_entries(entries: &[ModalFeatureEntry]) -> Result<Self> {
        let dim = entries.first().map_or(0, |e| e.feature.len());
        let size = entries.iter().map(|e| e.item_id as usize + 1).max().unwrap_or(0);
        let mut values = vec![0.0; size * dim];
        let mut present = vec![false; size];
        for e in entries {
            if e.feature.len() != dim {
                return Err(ModelError::Invalid(format!("item {} feature has dim {}", e.item_id, e.feature.len())));
            }
            let i = e.item_id as usize;
            values[i * dim..(i + 1) * dim].copy_from_slice(&e.feature);
            present[i] = true;
        }
        Ok(FeatureTable { dim, values, present })
    }

    pub fn from_cache(cache: &FeatureCache) -> Result<Self> {
        Self::from_entries(&cache.read_all())
    }

    pub fn get(&self, item_id: u32) -> Option<&[f32]> {
        let i = item_id as usize;
        self.present.get(i).copied().unwrap_or(false).then(|| &self.values[i * self.dim..(i + 1) * self.dim])
    }
}

impl FeatureLookup for FeatureTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn append(&self, item_id: u32, out: &mut Vec<f32>) -> Result<()> {
        out.extend_from_slice(self.get(item_id).ok_or(ModelError::MissingFeature(item_id))?);
        Ok(())
    }
}

impl FeatureLookup for FeatureCache {
    fn dim(&self) -> usize {
        FeatureCache::dim(self)
    }

    fn append(&self, item_id: u32, out: &mut Vec<f32>) -> Result<()> {
        match self.lookup(item_id as u64) {
            Some(v) => out.extend_from_slice(v),
            None if self.mode() == Mode::Lenient => out.extend(self.get(item_id as u64)?),
            None => return Err(CacheError::Miss(item_id as u64).into()),
        }
        Ok(())
    }
}
