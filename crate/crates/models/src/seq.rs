//! Turning samples into request-grouped mini-batches.

use ppm_data::{Dataset, Labels, Sample};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{ModelError, Result};

/// Number of recency buckets.
pub const RECENCY_BUCKETS: usize = 24;

/// `min(buckets - 1, floor(log2(max(delta, 1))))`.
pub fn recency_bucket(delta_seconds: u64, buckets: usize) -> usize {
    let log2 = 63 - delta_seconds.max(1).leading_zeros() as usize;
    log2.min(buckets - 1)
}

/// Samples of several requests. Each request contributes one behavior
/// sequence, stored packed: sequence `r` occupies `lengths[r]` rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub seq_items: Vec<u32>,
    pub positions: Vec<usize>,
    pub recency: Vec<usize>,
    pub lengths: Vec<usize>,
    /// Sequence index of every sample.
    pub group: Vec<usize>,
    pub request_ids: Vec<u64>,
    pub targets: Vec<u32>,
    /// `targets.len() x context_dim`.
    pub context: Vec<f32>,
    pub context_dim: usize,
    pub labels: Vec<Labels>,
    /// Index of every sample in the slice the batch was built from.
    pub sample_index: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn clicks(&self) -> Vec<f64> {
        self.labels.iter().map(|l| l.click as f64).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqLimits {
    pub max_seq_len: usize,
    pub max_position: usize,
}

/// Splits `samples` at request boundaries into batches of roughly
/// `batch_size` samples. A request is never split across batches. With
/// `shuffle`, request order is permuted by the given seed.
pub fn make_batches(
    dataset: &Dataset,
    samples: &[Sample],
    batch_size: usize,
    limits: SeqLimits,
    shuffle: Option<u64>,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(ModelError::Config("batch_size must be positive".into()));
    }
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    for i in 1..=samples.len() {
        if i == samples.len() || samples[i].request_id != samples[start].request_id {
            groups.push((start, i));
            start = i;
        }
    }
    if let Some(seed) = shuffle {
        groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let mut batches = Vec::new();
    let mut b = Batch::default();
    for (lo, hi) in groups {
        let first = &samples[lo];
        let events = &dataset.behavior(first).events;
        if events.is_empty() {
            return Err(ModelError::Invalid(format!("request {} has an empty behavior sequence", first.request_id)));
        }
        let events = &events[events.len().saturating_sub(limits.max_seq_len)..];
        let seq = b.lengths.len();
        for e in events {
            b.seq_items.push(e.item_id);
            b.positions.push((e.display_position as usize).min(limits.max_position - 1));
            b.recency.push(recency_bucket(first.timestamp.saturating_sub(e.timestamp), RECENCY_BUCKETS));
        }
        b.lengths.push(events.len());
        b.request_ids.push(first.request_id);
        for (i, s) in samples.iter().enumerate().take(hi).skip(lo) {
            b.group.push(seq);
            b.targets.push(s.target_item_id);
            b.context.extend_from_slice(&s.context_features);
            b.context_dim = s.context_features.len();
            b.labels.push(s.labels);
            b.sample_index.push(i);
        }
        if b.len() >= batch_size {
            batches.push(std::mem::take(&mut b));
        }
    }
    if !b.is_empty() {
        batches.push(b);
    }
    Ok(batches)
}
