use serde::{Deserialize, Serialize};

use crate::config::GenConfig;

pub const SECONDS_PER_DAY: u64 = 86_400;
/// Warm-up history occupies the week before day 1.
pub const WINDOW_START: u64 = 7 * SECONDS_PER_DAY;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: u32,
    pub shop_id: u32,
    pub brand_id: u32,
    pub category_id: u32,
    pub title_tokens: Vec<u32>,
    pub image_feature: Vec<f32>,
    pub entity_id: u32,
    /// Ground truth only. Models must not read this.
    pub latent_content: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub item_id: u32,
    pub timestamp: u64,
    pub display_position: u32,
}

/// Clicked items of one user, oldest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSequence {
    pub user_id: u32,
    pub events: Vec<Event>,
}

impl BehaviorSequence {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// One page view. All samples of a request share its behavior snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub request_id: u64,
    pub user_id: u32,
    pub timestamp: u64,
    pub behavior: BehaviorSequence,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub click: u8,
    pub order: u8,
    pub cart: u8,
}

impl Labels {
    pub fn funnel_consistent(&self) -> bool {
        self.click <= 1
            && self.order <= self.click
            && self.cart <= self.click
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub request_id: u64,
    pub user_id: u32,
    pub target_item_id: u32,
    pub display_position: u32,
    pub timestamp: u64,
    pub context_features: Vec<f32>,
    pub labels: Labels,
    /// Generator's click probability for this impression.
    pub click_prob: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryItemPair {
    pub query_tokens: Vec<u32>,
    pub item_id: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub seed: u64,
    pub items: Vec<ItemRecord>,
    /// Indexed by request id.
    pub requests: Vec<Request>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub queries: Vec<QueryItemPair>,
}

impl Dataset {
    /// Timestamp at which day 1 starts; earlier activity is warm-up history.
    pub fn window_start(&self) -> u64 {
        WINDOW_START
    }

    /// First timestamp of the test day.
    pub fn test_start(&self) -> u64 {
        self.window_start() + (self.config.days as u64 - 1) * SECONDS_PER_DAY
    }

    /// 1-based day within the window; 0 for warm-up.
    pub fn day_of(&self, timestamp: u64) -> u32 {
        let start = self.window_start();
        if timestamp < start {
            0
        } else {
            ((timestamp - start) / SECONDS_PER_DAY) as u32 + 1
        }
    }

    pub fn samples(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn request(&self, request_id: u64) -> &Request {
        &self.requests[request_id as usize]
    }

    pub fn behavior(&self, sample: &Sample) -> &BehaviorSequence {
        &self.request(sample.request_id).behavior
    }

    pub fn item(&self, item_id: u32) -> &ItemRecord {
        &self.items[item_id as usize]
    }

    /// Training impressions per item id.
    pub fn train_item_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.items.len()];
        for s in &self.train {
            counts[s.target_item_id as usize] += 1;
        }
        counts
    }

    /// Training samples whose day lies in `first..=last`.
    pub fn train_days(&self, first: u32, last: u32) -> Vec<Sample> {
        self.train
            .iter()
            .filter(|s| (first..=last).contains(&self.day_of(s.timestamp)))
            .cloned()
            .collect()
    }
}

