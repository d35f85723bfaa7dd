use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DataError, Result};
use crate::types::Dataset;

/// Test samples grouped by how often their target item appears in training.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrequencyBuckets {
    pub edges: Vec<u64>,
    /// Bucket of each test sample, in test order.
    pub assignment: Vec<usize>,
    /// Number of test samples per bucket; `edges.len() + 1` entries.
    pub sizes: Vec<usize>,
}

impl FrequencyBuckets {
    /// Human-readable range of bucket `b`, e.g. `[10, 100)`.
    pub fn label(&self, b: usize) -> String {
        let lo = if b == 0 { 0 } else { self.edges[b - 1] };
        match self.edges.get(b) {
            Some(hi) => format!("[{lo}, {hi})"),
            None => format!("[{lo}, inf)"),
        }
    }

    /// Indices into the test split belonging to bucket `b`.
    pub fn members(&self, b: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == b)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Bucket `b` holds counts in `[edges[b-1], edges[b])`, with open ends.
pub fn split_by_frequency(dataset: &Dataset, bucket_edges: &[u64]) -> Result<FrequencyBuckets> {
    if bucket_edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(DataError::Invalid("bucket edges must be strictly increasing".into()));
    }
    if dataset.test.is_empty() {
        return Err(DataError::EmptyTestSet);
    }
    let counts = dataset.train_item_counts();
    let mut sizes = vec![0; bucket_edges.len() + 1];
    let assignment = dataset
        .test
        .iter()
        .map(|s| {
            let c = counts.get(s.target_item_id as usize).copied().unwrap_or(0);
            let b = bucket_edges.partition_point(|&e| e <= c);
            sizes[b] += 1;
            b
        })
        .collect();
    Ok(FrequencyBuckets { edges: bucket_edges.to_vec(), assignment, sizes })
}

/// Keeps `round(fraction * n)` training samples chosen uniformly without
/// replacement, in their original order. The test split is unchanged.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Invalid(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = dataset.train.len();
    let keep = ((fraction * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    Ok(Dataset {
        config: dataset.config.clone(),
        seed: dataset.seed,
        items: dataset.items.clone(),
        requests: dataset.requests.clone(),
        train: idx.into_iter().map(|i| dataset.train[i].clone()).collect(),
        test: dataset.test.clone(),
        queries: dataset.queries.clone(),
    })
}
