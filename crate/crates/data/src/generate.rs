use std::collections::VecDeque;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::GenConfig;
use crate::error::{DataError, Result};
use crate::types::{
    BehaviorSequence, Dataset, Event, ItemRecord, Labels, QueryItemPair, Request, Sample,
    SECONDS_PER_DAY, WINDOW_START,
};

// Independent RNG streams so that changing one stage does not reshuffle the others.
const STREAM_WORLD: u64 = 1;
const STREAM_ITEMS: u64 = 2;
const STREAM_USERS: u64 = 3;
const STREAM_REQUESTS: u64 = 4;
const STREAM_QUERIES: u64 = 5;

// Weights of the conditional order/cart heads.
const ORDER_CONTENT: f64 = 1.0;
const CART_CONTENT: f64 = 1.0;
const FUNNEL_AFFINITY: f64 = 0.5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Global parameters of the generative process.
struct World {
    centers: Vec<Vec<f64>>,
    word_vectors: Vec<Vec<f64>>,
    prototypes: Vec<Vec<f64>>,
    /// image_dim x latent_dim
    projection: Vec<Vec<f64>>,
    quality: Vec<f64>,
    order_dir: Vec<f64>,
    cart_dir: Vec<f64>,
}

impl World {
    fn new(cfg: &GenConfig, rng: &mut impl Rng) -> Self {
        let dz = cfg.latent_dim;
        let inv = 1.0 / (dz as f64).sqrt();
        World {
            centers: (0..cfg.num_categories).map(|_| normal_vec(rng, dz)).collect(),
            word_vectors: (0..cfg.title_vocab).map(|_| normal_vec(rng, dz)).collect(),
            prototypes: (0..cfg.num_entities).map(|_| normal_vec(rng, dz)).collect(),
            projection: (0..cfg.image_dim)
                .map(|_| normal_vec(rng, dz).into_iter().map(|v| v * inv).collect())
                .collect(),
            quality: normal_vec(rng, dz),
            order_dir: normal_vec(rng, dz),
            cart_dir: normal_vec(rng, dz),
        }
    }

    fn topic(&self, cfg: &GenConfig, z: &[f64]) -> WeightedIndex<f64> {
        let scale = cfg.topic_sharpness / (z.len() as f64).sqrt();
        let logits: Vec<f64> = self.word_vectors.iter().map(|w| scale * dot(w, z)).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        WeightedIndex::new(weights).expect("softmax weights are positive")
    }

    fn entity(&self, z: &[f64]) -> u32 {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (k, p) in self.prototypes.iter().enumerate() {
            let s = dot(p, z);
            if s > best_score {
                best_score = s;
                best = k;
            }
        }
        best as u32
    }
}

struct ItemTruth {
    z: Vec<f64>,
    bias: f64,
    quality: f64,
    order_logit: f64,
    cart_logit: f64,
}

fn sample_len(rng: &mut impl Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Generates a complete dataset. Identical `(config, seed)` give identical output.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let dz = cfg.latent_dim;
    let inv_sqrt = 1.0 / (dz as f64).sqrt();
    let world = World::new(cfg, &mut stream(seed, STREAM_WORLD));

    let mut rng = stream(seed, STREAM_ITEMS);
    let own = (1.0 - cfg.category_weight * cfg.category_weight).sqrt();
    let mut items = Vec::with_capacity(cfg.num_items);
    let mut truth = Vec::with_capacity(cfg.num_items);
    for item_id in 0..cfg.num_items {
        let category = rng.random_range(0..cfg.num_categories);
        let shop = rng.random_range(0..cfg.num_shops);
        let brand = rng.random_range(0..cfg.num_brands);
        let noise = normal_vec(&mut rng, dz);
        let z: Vec<f64> = world.centers[category]
            .iter()
            .zip(&noise)
            .map(|(c, e)| cfg.category_weight * c + own * e)
            .collect();
        let image: Vec<f32> = world
            .projection
            .iter()
            .map(|row| {
                let e: f64 = rng.sample(StandardNormal);
                (dot(row, &z) + cfg.image_noise * e) as f32
            })
            .collect();
        let topic = world.topic(cfg, &z);
        let len = sample_len(&mut rng, cfg.min_title_len, cfg.max_title_len);
        let title: Vec<u32> = (0..len).map(|_| topic.sample(&mut rng) as u32).collect();
        let bias = cfg.item_bias_std * rng.sample::<f64, _>(StandardNormal);
        truth.push(ItemTruth {
            bias,
            quality: cfg.quality_weight * dot(&world.quality, &z) * inv_sqrt,
            order_logit: cfg.order_offset + ORDER_CONTENT * dot(&world.order_dir, &z) * inv_sqrt,
            cart_logit: cfg.cart_offset + CART_CONTENT * dot(&world.cart_dir, &z) * inv_sqrt,
            z: z.clone(),
        });
        items.push(ItemRecord {
            item_id: item_id as u32,
            shop_id: shop as u32,
            brand_id: brand as u32,
            category_id: category as u32,
            title_tokens: title,
            image_feature: image,
            entity_id: world.entity(&z),
            latent_content: z.iter().map(|&v| v as f32).collect(),
        });
    }

    // Power-law exposure over a random popularity order.
    let mut order: Vec<usize> = (0..cfg.num_items).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut exposure = vec![0.0; cfg.num_items];
    for (rank, &item) in order.iter().enumerate() {
        exposure[item] = ((rank + 1) as f64).powf(-cfg.zipf_exponent);
    }
    let popularity = WeightedIndex::new(&exposure)
        .map_err(|e| DataError::Config(format!("exposure weights: {e}")))?;

    let mut sim = Simulator {
        cfg,
        truth: &truth,
        popularity: &popularity,
        prefs: Vec::new(),
        histories: vec![VecDeque::new(); cfg.num_users],
        seen: vec![false; cfg.num_items],
        inv_sqrt,
    };

    // Warm-up: every user gets some history before day 1.
    let mut urng = stream(seed, STREAM_USERS);
    sim.prefs = (0..cfg.num_users).map(|_| normal_vec(&mut urng, dz)).collect();
    for user in 0..cfg.num_users {
        let mut stamps: Vec<u64> =
            (0..cfg.warmup_requests).map(|_| urng.random_range(0..WINDOW_START)).collect();
        stamps.sort_unstable();
        for ts in stamps {
            sim.request(&mut urng, user, ts, cfg.candidates_per_request, None);
        }
        // A user with no clicks yet keeps browsing until one happens.
        let mut ts = WINDOW_START - 1;
        while sim.histories[user].is_empty() {
            sim.request(&mut urng, user, ts, cfg.candidates_per_request, None);
            ts = ts.saturating_sub(1);
        }
    }

    let mut rrng = stream(seed, STREAM_REQUESTS);
    let test_start = WINDOW_START + (cfg.days as u64 - 1) * SECONDS_PER_DAY;
    let test_end = test_start + SECONDS_PER_DAY;
    let mut requests = Vec::new();
    let mut train = Vec::with_capacity(cfg.num_train);
    let mut test = Vec::with_capacity(cfg.num_test);
    for (total, lo, hi, out) in [
        (cfg.num_train, WINDOW_START, test_start, &mut train),
        (cfg.num_test, test_start, test_end, &mut test),
    ] {
        let k = cfg.candidates_per_request;
        let n_req = total.div_ceil(k);
        let mut stamps: Vec<u64> = (0..n_req).map(|_| rrng.random_range(lo..hi)).collect();
        stamps.sort_unstable();
        for (j, ts) in stamps.into_iter().enumerate() {
            let slate = if j + 1 == n_req { total - k * (n_req - 1) } else { k };
            let user = rrng.random_range(0..cfg.num_users);
            let request_id = requests.len() as u64;
            let behavior = BehaviorSequence {
                user_id: user as u32,
                events: sim.histories[user].iter().copied().collect(),
            };
            requests.push(Request { request_id, user_id: user as u32, timestamp: ts, behavior });
            sim.request(&mut rrng, user, ts, slate, Some((request_id, out)));
        }
    }

    let mut qrng = stream(seed, STREAM_QUERIES);
    let queries = (0..cfg.num_query_pairs)
        .map(|_| {
            let item = popularity.sample(&mut qrng);
            let topic = world.topic(cfg, &truth[item].z);
            let len = sample_len(&mut qrng, cfg.min_query_len, cfg.max_query_len);
            QueryItemPair {
                query_tokens: (0..len).map(|_| topic.sample(&mut qrng) as u32).collect(),
                item_id: item as u32,
            }
        })
        .collect();

    Ok(Dataset { config: cfg.clone(), seed, items, requests, train, test, queries })
}

struct Simulator<'a> {
    cfg: &'a GenConfig,
    truth: &'a [ItemTruth],
    popularity: &'a WeightedIndex<f64>,
    prefs: Vec<Vec<f64>>,
    histories: Vec<VecDeque<Event>>,
    seen: Vec<bool>,
    inv_sqrt: f64,
}

impl Simulator<'_> {
    /// Shows `slate` distinct items to `user`, draws labels and appends clicks
    /// to the user's history. Samples are emitted only when `out` is given.
    fn request(
        &mut self,
        rng: &mut ChaCha8Rng,
        user: usize,
        ts: u64,
        slate: usize,
        mut out: Option<(u64, &mut Vec<Sample>)>,
    ) {
        let cfg = self.cfg;
        let rho = cfg.preference_persistence;
        let step = (1.0 - rho * rho).sqrt();
        for u in self.prefs[user].iter_mut() {
            *u = rho * *u + step * rng.sample::<f64, _>(StandardNormal);
        }
        let context: Vec<f64> = normal_vec(rng, cfg.context_dim);

        let mut shown = Vec::with_capacity(slate);
        while shown.len() < slate {
            let item = self.popularity.sample(rng);
            if !self.seen[item] {
                self.seen[item] = true;
                shown.push(item);
            }
        }
        for &item in &shown {
            self.seen[item] = false;
        }

        let pref = &self.prefs[user];
        let mut clicks = Vec::new();
        for (slot, &item) in shown.iter().enumerate() {
            let t = &self.truth[item];
            let affinity = dot(pref, &t.z) * self.inv_sqrt;
            let logit = cfg.affinity_weight * affinity
                + t.quality
                + t.bias
                + cfg.context_weight * context[0]
                + cfg.click_offset;
            let p_click = sigmoid(logit);
            let click = rng.random::<f64>() < p_click;
            let mut labels = Labels::default();
            if click {
                labels.click = 1;
                let p_order = sigmoid(t.order_logit + FUNNEL_AFFINITY * affinity);
                let p_cart = sigmoid(t.cart_logit + FUNNEL_AFFINITY * affinity);
                labels.order = (rng.random::<f64>() < p_order) as u8;
                labels.cart = (rng.random::<f64>() < p_cart) as u8;
                clicks.push(Event { item_id: item as u32, timestamp: ts, display_position: slot as u32 });
            }
            if let Some((request_id, samples)) = out.as_mut() {
                samples.push(Sample {
                    request_id: *request_id,
                    user_id: user as u32,
                    target_item_id: item as u32,
                    display_position: slot as u32,
                    timestamp: ts,
                    context_features: context.iter().map(|&c| c as f32).collect(),
                    labels,
                    click_prob: p_click as f32,
                });
            }
        }

        let history = &mut self.histories[user];
        history.extend(clicks);
        while history.len() > cfg.max_seq_len {
            history.pop_front();
        }
    }
}
