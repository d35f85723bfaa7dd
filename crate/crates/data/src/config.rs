use serde::{Deserialize, Serialize};

use crate::error::{DataError, Result};

/// Sizes and generative-process knobs. Defaults are the desk-scale world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub num_items: usize,
    pub num_users: usize,
    pub num_train: usize,
    pub num_test: usize,
    pub num_shops: usize,
    pub num_brands: usize,
    pub num_categories: usize,
    /// Dimension of the hidden content vector.
    pub latent_dim: usize,
    pub image_dim: usize,
    pub title_vocab: usize,
    pub num_entities: usize,
    /// Longest behavior sequence kept per request.
    pub max_seq_len: usize,
    pub context_dim: usize,
    /// Items shown per request; each shown item is one sample.
    pub candidates_per_request: usize,
    /// Length of the simulated window; the last day is the test split.
    pub days: u32,
    /// Requests per user simulated before the window to seed histories.
    pub warmup_requests: usize,
    pub min_title_len: usize,
    pub max_title_len: usize,
    pub min_query_len: usize,
    pub max_query_len: usize,
    pub num_query_pairs: usize,
    /// Exposure of the item at popularity rank r is proportional to (r+1)^-s.
    pub zipf_exponent: f64,
    /// Minimum share of impressions the top decile of items must receive.
    pub head_mass: f64,
    pub image_noise: f64,
    /// Share of the content vector explained by the item's category.
    pub category_weight: f64,
    /// Sharpness of the title topic model.
    pub topic_sharpness: f64,
    pub affinity_weight: f64,
    pub quality_weight: f64,
    pub item_bias_std: f64,
    pub context_weight: f64,
    pub click_offset: f64,
    pub order_offset: f64,
    pub cart_offset: f64,
    /// Per-request autocorrelation of a user's preference random walk.
    pub preference_persistence: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_items: 10_000,
            num_users: 2_000,
            num_train: 200_000,
            num_test: 20_000,
            num_shops: 500,
            num_brands: 1_000,
            num_categories: 100,
            latent_dim: 16,
            image_dim: 32,
            title_vocab: 1_000,
            num_entities: 200,
            max_seq_len: 50,
            context_dim: 8,
            candidates_per_request: 10,
            days: 14,
            warmup_requests: 3,
            min_title_len: 8,
            max_title_len: 16,
            min_query_len: 3,
            max_query_len: 6,
            num_query_pairs: 50_000,
            zipf_exponent: 1.0,
            head_mass: 0.6,
            image_noise: 0.1,
            category_weight: 0.6,
            topic_sharpness: 3.0,
            affinity_weight: 1.5,
            quality_weight: 0.8,
            item_bias_std: 0.7,
            context_weight: 0.3,
            click_offset: -1.5,
            order_offset: -1.5,
            cart_offset: -1.0,
            preference_persistence: 0.98,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_items", self.num_items),
            ("num_users", self.num_users),
            ("num_train", self.num_train),
            ("num_test", self.num_test),
            ("num_shops", self.num_shops),
            ("num_brands", self.num_brands),
            ("num_categories", self.num_categories),
            ("latent_dim", self.latent_dim),
            ("image_dim", self.image_dim),
            ("title_vocab", self.title_vocab),
            ("num_entities", self.num_entities),
            ("max_seq_len", self.max_seq_len),
            ("context_dim", self.context_dim),
            ("candidates_per_request", self.candidates_per_request),
            ("min_title_len", self.min_title_len),
            ("min_query_len", self.min_query_len),
            ("num_query_pairs", self.num_query_pairs),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(DataError::Config(format!("{name} must be positive")));
        }
        if self.days < 4 {
            return Err(DataError::Config("days must be at least 4".into()));
        }
        if self.max_title_len < self.min_title_len || self.max_title_len > 16 {
            return Err(DataError::Config("title length range must lie within 1..=16".into()));
        }
        if self.max_query_len < self.min_query_len {
            return Err(DataError::Config("query length range is empty".into()));
        }
        if self.candidates_per_request > self.num_items {
            return Err(DataError::Config("more candidates per request than items".into()));
        }
        if !(0.0..1.0).contains(&self.preference_persistence) {
            return Err(DataError::Config("preference_persistence must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.category_weight) || !(0.0..=1.0).contains(&self.head_mass) {
            return Err(DataError::Config("category_weight and head_mass must be in [0, 1]".into()));
        }
        if self.image_noise < 0.0 || self.zipf_exponent < 0.0 || self.item_bias_std < 0.0 {
            return Err(DataError::Config("noise scales and exponents must be nonnegative".into()));
        }
        Ok(())
    }
}
