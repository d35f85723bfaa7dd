//! Surrogate text and vision encoders.
//!
//! The text encoder mean-pools token embeddings and applies a two-layer
//! feed-forward pooler; it is trained by contrasting each search query with
//! the title of the item clicked for it against the other titles in the batch.
//! The vision encoder is a two-layer feed-forward net over the raw image
//! vector with a linear entity classifier on top.

use ppm_cache::{EncoderVersion, FeatureSource, ModalFeatureEntry};
use ppm_core::{Activation, Graph, Linear, Mlp, ParamId, ParamStore, Scalar, SeqBatch, Var, INIT_STD};
use ppm_data::{ItemRecord, QueryItemPair};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{config_hash, Checkpoint, Metadata, ENCODER_MAGIC};
use crate::error::{ModelError, Result};
use crate::train::Trainer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModEncConfig {
    pub text_dim: usize,
    pub vision_dim: usize,
    pub vision_hidden: usize,
    /// Softmax temperature of the query matching loss.
    pub temperature: f64,
    pub batch_size: usize,
    pub qm_epochs: usize,
    pub ep_epochs: usize,
    pub lr: f64,
    /// Share of pairs and items held out for evaluation.
    pub holdout: f64,
}

impl Default for ModEncConfig {
    fn default() -> Self {
        ModEncConfig {
            text_dim: 32,
            vision_dim: 32,
            vision_hidden: 64,
            temperature: 0.05,
            batch_size: 64,
            qm_epochs: 10,
            ep_epochs: 30,
            lr: 3e-3,
            holdout: 0.1,
        }
    }
}

impl ModEncConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(ModelError::Config("temperature must be positive".into()));
        }
        if self.text_dim == 0 || self.vision_dim == 0 || self.vision_hidden == 0 || self.batch_size == 0 {
            return Err(ModelError::Config("encoder sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(ModelError::Config("holdout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embedding: ParamId,
    pub pooler: Mlp,
    pub dim: usize,
}

impl TextEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, vocab: usize, dim: usize) -> Result<Self> {
        Ok(TextEncoder {
            token_embedding: store.gaussian("text.token_embedding", &[vocab, dim], INIT_STD)?,
            pooler: Mlp::new(store, "text.pooler", &[dim, dim, dim], Activation::Relu)?,
            dim,
        })
    }

    /// One output row per token list.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, texts: &[&[u32]]) -> Result<Var> {
        if let Some(i) = texts.iter().position(|t| t.is_empty()) {
            return Err(ModelError::Invalid(format!("text {i} has no tokens")));
        }
        let ids: Vec<usize> = texts.iter().flat_map(|t| t.iter().map(|&w| w as usize)).collect();
        let lengths: Vec<usize> = texts.iter().map(|t| t.len()).collect();
        let emb = g.embedding(self.token_embedding, &ids)?;
        let pooled = g.segment_mean(emb, &SeqBatch::packed(&lengths)?)?;
        Ok(self.pooler.forward(g, pooled)?)
    }
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    pub ffn: Mlp,
    pub entity_head: Linear,
    pub image_dim: usize,
    pub dim: usize,
}

impl VisionEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        image_dim: usize,
        hidden: usize,
        dim: usize,
        num_entities: usize,
    ) -> Result<Self> {
        Ok(VisionEncoder {
            ffn: Mlp::new(store, "vision.ffn", &[image_dim, hidden, dim], Activation::Relu)?,
            entity_head: Linear::new(store, "vision.entity_head", dim, num_entities, true)?,
            image_dim,
            dim,
        })
    }

    /// `images` is row-major `[n x image_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, images: &[f32]) -> Result<Var> {
        if images.is_empty() || images.len() % self.image_dim != 0 {
            return Err(ModelError::Invalid(format!("image buffer of {} floats", images.len())));
        }
        let x = g.constant(images.len() / self.image_dim, self.image_dim, images.iter().map(|&v| T::of(v as f64)).collect())?;
        Ok(self.ffn.forward(g, x)?)
    }

    pub fn entity_logits<T: Scalar>(&self, g: &mut Graph<T>, embedding: Var) -> Result<Var> {
        Ok(self.entity_head.forward(g, embedding)?)
    }
}

/// Mean over the batch of `-log softmax_j(cos(q_i, d_j) / tau)[i]`: every
/// other item in the batch is a negative for query `i`.
pub fn qm_loss<T: Scalar>(g: &mut Graph<T>, queries: Var, items: Var, temperature: f64) -> Result<Var> {
    let (b, _) = g.shape(queries);
    if g.shape(items) != g.shape(queries) {
        return Err(ModelError::Invalid(format!("{} queries but {} items", b, g.shape(items).0)));
    }
    if !(temperature > 0.0) {
        return Err(ModelError::Config("temperature must be positive".into()));
    }
    let q = g.normalize_rows(queries)?;
    let d = g.normalize_rows(items)?;
    let sims = g.matmul(q, d, true)?;
    let logits = g.scale(sims, 1.0 / temperature);
    let targets: Vec<usize> = (0..b).collect();
    Ok(g.softmax_cross_entropy(logits, &targets)?)
}

/// Mean negative log-likelihood of the true entity.
pub fn ep_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, entity_ids: &[u32]) -> Result<Var> {
    let targets: Vec<usize> = entity_ids.iter().map(|&e| e as usize).collect();
    Ok(g.softmax_cross_entropy(logits, &targets)?)
}

/// Learning curves and held-out quality of [`train_encoders`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub qm_epoch_loss: Vec<f64>,
    pub ep_epoch_loss: Vec<f64>,
    /// Held-out top-1 query to item accuracy among in-batch candidates.
    pub retrieval_accuracy: Option<f64>,
    /// Held-out entity accuracy.
    pub entity_accuracy: Option<f64>,
    pub steps: u64,
}

pub struct ModalityEncoders {
    pub store: ParamStore<f32>,
    pub text: TextEncoder,
    pub vision: VisionEncoder,
    pub config: ModEncConfig,
}

impl ModalityEncoders {
    pub fn new(config: &ModEncConfig, vocab: usize, image_dim: usize, num_entities: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let text = TextEncoder::new(&mut store, vocab, config.text_dim)?;
        let vision = VisionEncoder::new(&mut store, image_dim, config.vision_hidden, config.vision_dim, num_entities)?;
        Ok(ModalityEncoders { store, text, vision, config: config.clone() })
    }

    /// Shapes taken from the catalog and query vocabulary.
    pub fn for_catalog(config: &ModEncConfig, items: &[ItemRecord], vocab: usize, num_entities: usize, seed: u64) -> Result<Self> {
        let image_dim = items.first().map_or(0, |i| i.image_feature.len());
        Self::new(config, vocab, image_dim, num_entities, seed)
    }

    pub fn feature_dim(&self) -> usize {
        self.text.dim + self.vision.dim
    }

    pub fn checkpoint(&self, metadata: Metadata) -> Checkpoint {
        Checkpoint::from_store(ENCODER_MAGIC, &self.store, |_| true, metadata)
    }

    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.expect_magic(ENCODER_MAGIC)?;
        ckpt.load_into(&mut self.store, |_| true)?;
        Ok(())
    }

    /// sha256 over parameter names, shapes and values.
    pub fn version(&self) -> EncoderVersion {
        let mut h = Sha256::new();
        for (_, p) in self.store.iter() {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// `[text | image]` feature rows for `items`, in order.
    pub fn encode_items(&self, items: &[&ItemRecord]) -> Result<Vec<Vec<f32>>> {
        for it in items {
            if it.title_tokens.is_empty() {
                return Err(ModelError::Invalid(format!("item {} has no title tokens", it.item_id)));
            }
            if it.image_feature.len() != self.vision.image_dim {
                return Err(ModelError::Invalid(format!(
                    "item {} has image dim {}, expected {}",
                    it.item_id,
                    it.image_feature.len(),
                    self.vision.image_dim
                )));
            }
        }
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(256) {
            let mut g = Graph::new(&self.store);
            let titles: Vec<&[u32]> = chunk.iter().map(|i| i.title_tokens.as_slice()).collect();
            let t = self.text.forward(&mut g, &titles)?;
            let images: Vec<f32> = chunk.iter().flat_map(|i| i.image_feature.iter().copied()).collect();
            let v = self.vision.forward(&mut g, &images)?;
            let (tv, vv) = (g.value(t), g.value(v));
            let (dt, dv) = (self.text.dim, self.vision.dim);
            for r in 0..chunk.len() {
                let mut row = Vec::with_capacity(dt + dv);
                row.extend_from_slice(&tv[r * dt..(r + 1) * dt]);
                row.extend_from_slice(&vv[r * dv..(r + 1) * dv]);
                out.push(row);
            }
        }
        Ok(out)
    }

    /// One entry per catalog item: `[text(d_t) | image(d_v)]`.
    pub fn export_modal_features(&self, items: &[ItemRecord]) -> Result<Vec<ModalFeatureEntry>> {
        let refs: Vec<&ItemRecord> = items.iter().collect();
        let version = self.version();
        Ok(self
            .encode_items(&refs)?
            .into_iter()
            .zip(items)
            .map(|(feature, it)| ModalFeatureEntry { item_id: it.item_id as u64, feature, encoder_version: version })
            .collect())
    }

    /// Fraction of held-out queries whose best-scoring title in a batch of
    /// `batch` pairs belongs to their own item.
    pub fn retrieval_accuracy(&self, pairs: &[QueryItemPair], items: &[ItemRecord], batch: usize) -> Result<Option<f64>> {
        let (mut hits, mut total) = (0usize, 0usize);
        for chunk in pairs.chunks(batch).filter(|c| c.len() == batch) {
            let mut g = Graph::new(&self.store);
            let queries: Vec<&[u32]> = chunk.iter().map(|p| p.query_tokens.as_slice()).collect();
            let titles: Vec<&[u32]> = chunk.iter().map(|p| items[p.item_id as usize].title_tokens.as_slice()).collect();
            let q = self.text.forward(&mut g, &queries)?;
            let d = self.text.forward(&mut g, &titles)?;
            let q = g.normalize_rows(q)?;
            let d = g.normalize_rows(d)?;
            let sims = g.matmul(q, d, true)?;
            let s = g.value(sims);
            for i in 0..batch {
                let row = &s[i * batch..(i + 1) * batch];
                let best = (0..batch).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
                hits += (chunk[best].item_id == chunk[i].item_id) as usize;
                total += 1;
            }
        }
        Ok((total > 0).then(|| hits as f64 / total as f64))
    }

    pub fn entity_accuracy(&self, items: &[&ItemRecord]) -> Result<Option<f64>> {
        if items.is_empty() {
            return Ok(None);
        }
        let mut hits = 0;
        for chunk in items.chunks(256) {
            let mut g = Graph::new(&self.store);
            let images: Vec<f32> = chunk.iter().flat_map(|i| i.image_feature.iter().copied()).collect();
            let v = self.vision.forward(&mut g, &images)?;
            let logits = self.vision.entity_logits(&mut g, v)?;
            let k = g.shape(logits).1;
            let lv = g.value(logits);
            for (r, it) in chunk.iter().enumerate() {
                let row = &lv[r * k..(r + 1) * k];
                let best = (0..k).max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a))).unwrap();
                hits += (best as u32 == it.entity_id) as usize;
            }
        }
        Ok(Some(hits as f64 / items.len() as f64))
    }

    pub fn metadata(&self, steps: u64) -> Metadata {
        Metadata {
            config_hash: config_hash(&self.config),
            window: "catalog+queries".into(),
            steps,
            parent: None,
            encoder_version: Some(ppm_cache::hex(&self.version())),
            plugin: None,
        }
    }
}

/// Splits `n` indices into a shuffled training part and a held-out tail.
fn split_indices(n: usize, holdout: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let held = ((n as f64) * holdout).round() as usize;
    let train = idx.split_off(held);
    (train, idx)
}

/// Trains the text encoder on query matching and the vision encoder on
/// entity prediction. Zero epochs leave the initialization untouched.
pub fn train_encoders(
    pairs: &[QueryItemPair],
    items: &[ItemRecord],
    num_entities: usize,
    vocab: usize,
    config: &ModEncConfig,
    seed: u64,
) -> Result<(ModalityEncoders, EncoderReport)> {
    if pairs.is_empty() || items.is_empty() {
        return Err(ModelError::Invalid("encoder training needs queries and items".into()));
    }
    let mut enc = ModalityEncoders::for_catalog(config, items, vocab, num_entities, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ed_2701);
    let mut report = EncoderReport::default();
    let b = config.batch_size;

    let (pair_train, pair_held) = split_indices(pairs.len(), config.holdout, &mut rng);
    // Query matching trains only the text encoder and entity prediction only
    // the vision encoder.
    enc.store.set_trainable_prefix("vision.", false);
    let mut trainer = Trainer::new("query matching", config.lr);
    for _ in 0..config.qm_epochs {
        let mut order = pair_train.clone();
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(b).filter(|c| c.len() > 1) {
            let text = &enc.text;
            let loss = trainer.step(&mut enc.store, config.lr, |g| {
                let queries: Vec<&[u32]> = chunk.iter().map(|&i| pairs[i].query_tokens.as_slice()).collect();
                let titles: Vec<&[u32]> =
                    chunk.iter().map(|&i| items[pairs[i].item_id as usize].title_tokens.as_slice()).collect();
                let q = text.forward(g, &queries)?;
                let d = text.forward(g, &titles)?;
                qm_loss(g, q, d, config.temperature)
            });
            let loss = loss?;
            sum += loss;
            n += 1;
        }
        report.qm_epoch_loss.push(sum / n.max(1) as f64);
    }
    let qm_steps = trainer.step;

    let (item_train, item_held) = split_indices(items.len(), config.holdout, &mut rng);
    enc.store.set_trainable_prefix("text.", false);
    enc.store.set_trainable_prefix("vision.", true);
    let mut trainer = Trainer::new("entity prediction", config.lr);
    for _ in 0..config.ep_epochs {
        let mut order = item_train.clone();
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0);
        for chunk in order.chunks(b) {
            let vision = &enc.vision;
            let loss = trainer.step(&mut enc.store, config.lr, |g| {
                let images: Vec<f32> = chunk.iter().flat_map(|&i| items[i].image_feature.iter().copied()).collect();
                let ids: Vec<u32> = chunk.iter().map(|&i| items[i].entity_id).collect();
                let v = vision.forward(g, &images)?;
                let logits = vision.entity_logits(g, v)?;
                ep_loss(g, logits, &ids)
            })?;
            sum += loss;
            n += 1;
        }
        report.ep_epoch_loss.push(sum / n.max(1) as f64);
    }
    enc.store.set_trainable_prefix("", false);
    report.steps = (qm_steps + trainer.step) as u64;

    let held_pairs: Vec<QueryItemPair> = pair_held.iter().map(|&i| pairs[i].clone()).collect();
    report.retrieval_accuracy = enc.retrieval_accuracy(&held_pairs, items, b)?;
    let held_items: Vec<&ItemRecord> = item_held.iter().map(|&i| &items[i]).collect();
    report.entity_accuracy = enc.entity_accuracy(&held_items)?;
    Ok((enc, report))
}

/// Computes features on the fly from a catalog; used to verify a cache.
pub struct OnTheFly<'a> {
    pub encoders: &'a ModalityEncoders,
    pub items: &'a [ItemRecord],
}

impl FeatureSource for OnTheFly<'_> {
    fn encoder_version(&self) -> EncoderVersion {
        self.encoders.version()
    }

    fn dim(&self) -> usize {
        self.encoders.feature_dim()
    }

    fn compute(&self, item_ids: &[u64]) -> ppm_cache::Result<Vec<Vec<f32>>> {
        let refs = item_ids
            .iter()
            .map(|&id| {
                self.items
                    .get(id as usize)
                    .filter(|it| it.item_id as u64 == id)
                    .ok_or_else(|| ppm_cache::CacheError::Source(format!("item {id} not in catalog")))
            })
            .collect::<ppm_cache::Result<Vec<_>>>()?;
        self.encoders.encode_items(&refs).map_err(|e| ppm_cache::CacheError::Source(e.to_string()))
    }
}
