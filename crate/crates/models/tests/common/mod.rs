#![allow(dead_code)]

use ppm_cache::ModalFeatureEntry;
use ppm_core::{gaussian_tensor, ParamStore};
use ppm_data::{generate, Dataset, GenConfig};
use ppm_models::features::FeatureTable;
use ppm_models::ppm::PpmConfig;
use ppm_models::seq::{make_batches, Batch, SeqLimits};
use ppm_models::urm::UrmConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A world small enough for gradient checks.
pub fn tiny_world(seed: u64) -> Dataset {
    let cfg = GenConfig {
        num_items: 30,
        num_users: 12,
        num_train: 300,
        num_test: 60,
        num_shops: 5,
        num_brands: 6,
        num_categories: 3,
        num_entities: 4,
        title_vocab: 20,
        num_query_pairs: 100,
        max_seq_len: 6,
        candidates_per_request: 4,
        ..GenConfig::default()
    };
    generate(&cfg, seed).unwrap()
}

/// A few thousand samples; enough for a model to learn something.
pub fn small_world(seed: u64) -> Dataset {
    let cfg = GenConfig {
        num_items: 2000,
        num_users: 400,
        num_train: 40_000,
        num_test: 6_000,
        num_shops: 100,
        num_brands: 200,
        num_categories: 30,
        num_entities: 40,
        title_vocab: 300,
        num_query_pairs: 8_000,
        max_seq_len: 20,
        ..GenConfig::default()
    };
    generate(&cfg, seed).unwrap()
}

pub fn random_features(n: usize, dim: usize, seed: u64) -> FeatureTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<ModalFeatureEntry> = (0..n)
        .map(|i| ModalFeatureEntry {
            item_id: i as u64,
            feature: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            encoder_version: [7; 32],
        })
        .collect();
    FeatureTable::from_entries(&entries).unwrap()
}

pub fn tiny_ppm() -> PpmConfig {
    PpmConfig {
        model_dim: 8,
        num_layers: 2,
        num_heads: 2,
        ffn_dim: 12,
        max_seq_len: 6,
        max_position: 10,
        head_hidden: 6,
        batch_size: 16,
        epochs: 1,
        ..PpmConfig::default()
    }
}

pub fn tiny_urm() -> UrmConfig {
    UrmConfig {
        id_dim: 2,
        id_layers: 2,
        id_heads: 2,
        id_ffn: 8,
        num_experts: 2,
        expert_hidden: 6,
        expert_dim: 4,
        tower_hidden: 3,
        batch_size: 16,
        max_seq_len: 6,
        max_position: 10,
        ppm: tiny_ppm(),
        ..UrmConfig::default()
    }
}

pub fn limits(cfg: &PpmConfig) -> SeqLimits {
    SeqLimits { max_seq_len: cfg.max_seq_len, max_position: cfg.max_position }
}

/// The first `requests` requests of the test split as one batch.
pub fn first_batch(d: &Dataset, requests: usize, lim: SeqLimits) -> Batch {
    let mut end = 0;
    let mut seen = 0;
    while end < d.test.len() {
        if end == 0 || d.test[end].request_id != d.test[end - 1].request_id {
            seen += 1;
            if seen > requests {
                break;
            }
        }
        end += 1;
    }
    let mut batches = make_batches(d, &d.test[..end], usize::MAX, lim, None).unwrap();
    assert_eq!(batches.len(), 1);
    batches.pop().unwrap()
}

/// Adds N(0, std^2) noise to every parameter so gradient checks are not
/// run at the tiny-scale initialization.
pub fn perturb(store: &mut ParamStore<f64>, seed: u64, std: f64) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let shape = store.get(id).value.shape().to_vec();
        let noise = gaussian_tensor::<f64>(seed.wrapping_mul(1_000_003).wrapping_add(k as u64), &shape, std).unwrap();
        let p = store.get_mut(id);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}
