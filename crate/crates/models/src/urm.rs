//! The unified ranking model.
//!
//! Two wirings share the multi-task head:
//!
//! * [`Arch::Unified`]: an ID sequence module (IDSM) and, optionally, the
//!   plug-in PPM branch run side by side; the fusion input is
//!   `[U_ID | I_ID | U_MO | I_MO | D]`.
//! * [`Arch::Shared`]: ID embeddings and projected modal features are
//!   concatenated per token and run through one shared transformer; the
//!   fusion input is `[U | I_ID | I_MO | D]`.

use ppm_core::{
    Activation, EncoderConfig, Graph, Linear, Mlp, ParamId, ParamStore, Scalar, SeqBatch, TransformerEncoder, Var,
    INIT_STD,
};
use ppm_data::{Dataset, ItemRecord, Labels, Sample};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Metadata, PPM_MAGIC, URM_MAGIC};
use crate::error::{ModelError, Result};
use crate::features::FeatureLookup;
use crate::ppm::{feature_matrix, user_representation, PpmBranch, PpmConfig};
use crate::seq::{make_batches, Batch, SeqLimits, RECENCY_BUCKETS};
use crate::train::{linear_lr, Trainer};

pub const TASKS: [&str; 3] = ["click", "order", "cart"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PluginMode {
    RandomInit,
    Frozen,
    Finetune,
}

impl PluginMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "random" | "random_init" => Some(PluginMode::RandomInit),
            "frozen" => Some(PluginMode::Frozen),
            "finetune" => Some(PluginMode::Finetune),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Unified { plugin: bool },
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UrmConfig {
    /// Embedding width of each id field.
    pub id_dim: usize,
    pub id_layers: usize,
    pub id_heads: usize,
    pub id_ffn: usize,
    pub num_experts: usize,
    pub expert_hidden: usize,
    pub expert_dim: usize,
    pub tower_hidden: usize,
    /// Loss weights of click, order and cart.
    pub task_weights: [f64; 3],
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    /// Learning-rate multiplier for the plug-in branch after a finetune load.
    pub plugin_lr_scale: f64,
    pub max_seq_len: usize,
    pub max_position: usize,
    /// Shape of the plug-in branch; must match the PPM checkpoint.
    pub ppm: PpmConfig,
}

impl Default for UrmConfig {
    fn default() -> Self {
        UrmConfig {
            id_dim: 16,
            id_layers: 2,
            id_heads: 2,
            id_ffn: 128,
            num_experts: 4,
            expert_hidden: 64,
            expert_dim: 32,
            tower_hidden: 16,
            task_weights: [1.0, 1.0, 1.0],
            batch_size: 256,
            epochs: 1,
            lr_start: 4e-4,
            lr_end: 1e-4,
            plugin_lr_scale: 0.3,
            max_seq_len: 50,
            max_position: 50,
            ppm: PpmConfig::default(),
        }
    }
}

impl UrmConfig {
    pub fn limits(&self) -> SeqLimits {
        SeqLimits { max_seq_len: self.max_seq_len, max_position: self.max_position }
    }

    fn encoder(&self, model_dim: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.id_layers,
            num_heads: self.id_heads,
            model_dim,
            ffn_dim: self.id_ffn,
            max_seq_len: self.max_seq_len,
        }
    }
}

/// Side information of the catalog; ids past the end map to the OOV row.
#[derive(Clone, Debug, PartialEq)]
pub struct IdCatalog {
    pub num_items: usize,
    pub num_shops: usize,
    pub num_brands: usize,
    pub num_categories: usize,
    shop: Vec<u32>,
    brand: Vec<u32>,
    category: Vec<u32>,
}

impl IdCatalog {
    pub fn new(items: &[ItemRecord], num_shops: usize, num_brands: usize, num_categories: usize) -> Self {
        IdCatalog {
            num_items: items.len(),
            num_shops,
            num_brands,
            num_categories,
            shop: items.iter().map(|i| i.shop_id).collect(),
            brand: items.iter().map(|i| i.brand_id).collect(),
            category: items.iter().map(|i| i.category_id).collect(),
        }
    }

    pub fn from_dataset(d: &Dataset) -> Self {
        Self::new(&d.items, d.config.num_shops, d.config.num_brands, d.config.num_categories)
    }

    /// Table rows `(sku, shop, brand, category)`; row 0 is reserved for
    /// unknown ids.
    pub fn rows(&self, item_id: u32) -> [usize; 4] {
        let i = item_id as usize;
        if i >= self.num_items {
            return [0; 4];
        }
        let field = |v: u32, n: usize| if (v as usize) < n { v as usize + 1 } else { 0 };
        [i + 1, field(self.shop[i], self.num_shops), field(self.brand[i], self.num_brands), field(self.category[i], self.num_categories)]
    }
}

/// Four id embedding tables.
#[derive(Clone, Debug)]
pub struct IdTables {
    pub tables: [ParamId; 4],
    pub dim: usize,
}

impl IdTables {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, catalog: &IdCatalog, dim: usize) -> Result<Self> {
        let sizes = [catalog.num_items, catalog.num_shops, catalog.num_brands, catalog.num_categories];
        let names = ["sku", "shop", "brand", "category"];
        let mut tables = Vec::new();
        for (name, size) in names.iter().zip(sizes) {
            tables.push(store.gaussian(&format!("{prefix}.{name}"), &[size + 1, dim], INIT_STD)?);
        }
        Ok(IdTables { tables: tables.try_into().unwrap(), dim })
    }

    /// `[E_sku | E_shop | E_brand | E_category]`, one row per item.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, catalog: &IdCatalog, items: &[u32]) -> Result<Var> {
        let rows: Vec<[usize; 4]> = items.iter().map(|&i| catalog.rows(i)).collect();
        let mut parts = Vec::with_capacity(4);
        for (f, &table) in self.tables.iter().enumerate() {
            let idx: Vec<usize> = rows.iter().map(|r| r[f]).collect();
            parts.push(g.embedding(table, &idx)?);
        }
        Ok(g.concat_cols(&parts)?)
    }
}

/// ID sequential module: id embeddings plus position and recency, encoded by
/// a transformer and mean-pooled.
#[derive(Clone, Debug)]
pub struct Idsm {
    pub ids: IdTables,
    pub position: ParamId,
    pub recency: ParamId,
    pub encoder: TransformerEncoder,
}

impl Idsm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, catalog: &IdCatalog, cfg: &UrmConfig) -> Result<Self> {
        let d = 4 * cfg.id_dim;
        Ok(Idsm {
            ids: IdTables::new(store, "idsm", catalog, cfg.id_dim)?,
            position: store.gaussian("idsm.position", &[cfg.max_position, d], INIT_STD)?,
            recency: store.gaussian("idsm.recency", &[RECENCY_BUCKETS, d], INIT_STD)?,
            encoder: TransformerEncoder::new(store, "idsm.encoder", cfg.encoder(d))?,
        })
    }

    /// Id embeddings of the sequence plus position and recency embeddings.
    pub fn compose<T: Scalar>(&self, g: &mut Graph<T>, catalog: &IdCatalog, batch: &Batch) -> Result<Var> {
        let ids = self.ids.embed(g, catalog, &batch.seq_items)?;
        let pos = g.embedding(self.position, &batch.positions)?;
        let rec = g.embedding(self.recency, &batch.recency)?;
        let e = g.add(ids, pos)?;
        Ok(g.add(e, rec)?)
    }

    pub fn encode_users<T: Scalar>(&self, g: &mut Graph<T>, catalog: &IdCatalog, batch: &Batch) -> Result<Var> {
        let h0 = self.compose(g, catalog, batch)?;
        let seqs = SeqBatch::packed(&batch.lengths)?;
        let h = self.encoder.forward(g, h0, &seqs)?;
        user_representation(g, h, &seqs)
    }
}

/// One transformer over `[ids | projected modal features]` tokens.
#[derive(Clone, Debug)]
pub struct SharedEncoder {
    pub ids: IdTables,
    pub modal_projection: Linear,
    pub position: ParamId,
    pub recency: ParamId,
    pub encoder: TransformerEncoder,
}

impl SharedEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, catalog: &IdCatalog, feature_dim: usize, cfg: &UrmConfig) -> Result<Self> {
        let dm = cfg.ppm.model_dim;
        let d = 4 * cfg.id_dim + dm;
        Ok(SharedEncoder {
            ids: IdTables::new(store, "shared", catalog, cfg.id_dim)?,
            modal_projection: Linear::new(store, "shared.modal_projection", feature_dim, dm, false)?,
            position: store.gaussian("shared.position", &[cfg.max_position, d], INIT_STD)?,
            recency: store.gaussian("shared.recency", &[RECENCY_BUCKETS, d], INIT_STD)?,
            encoder: TransformerEncoder::new(store, "shared.encoder", cfg.encoder(d))?,
        })
    }

    fn tokens<T: Scalar>(&self, g: &mut Graph<T>, catalog: &IdCatalog, items: &[u32], lookup: &dyn FeatureLookup) -> Result<Var> {
        let ids = self.ids.embed(g, catalog, items)?;
        let feats = feature_matrix(g, lookup, items)?;
        let modal = self.modal_projection.forward(g, feats)?;
        Ok(g.concat_cols(&[ids, modal])?)
    }

    pub fn encode_users<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        catalog: &IdCatalog,
        batch: &Batch,
        lookup: &dyn FeatureLookup,
    ) -> Result<Var> {
        let tok = self.tokens(g, catalog, &batch.seq_items, lookup)?;
        let pos = g.embedding(self.position, &batch.positions)?;
        let rec = g.embedding(self.recency, &batch.recency)?;
        let e = g.add(tok, pos)?;
        let h0 = g.add(e, rec)?;
        let seqs = SeqBatch::packed(&batch.lengths)?;
        let h = self.encoder.forward(g, h0, &seqs)?;
        user_representation(g, h, &seqs)
    }

    pub fn encode_items<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        catalog: &IdCatalog,
        items: &[u32],
        lookup: &dyn FeatureLookup,
    ) -> Result<Var> {
        self.tokens(g, catalog, items, lookup)
    }
}

/// Multi-gate mixture of experts with one tower per task.
#[derive(Clone, Debug)]
pub struct Mmoe {
    pub experts: Vec<Mlp>,
    pub gates: Vec<Linear>,
    pub towers: Vec<Mlp>,
}

/// Intermediate values of [`Mmoe::forward`].
#[derive(Clone, Debug)]
pub struct MmoeOutput {
    /// Per-task probabilities, each `[n x 1]`.
    pub probs: Vec<Var>,
    /// Per-task gate weights, each `[n x N]`.
    pub gates: Vec<Var>,
    /// Expert outputs `f_i(x)`, each `[n x expert_dim]`.
    pub experts: Vec<Var>,
    /// Per-task mixtures `f^k(x)`.
    pub mixtures: Vec<Var>,
}

impl Mmoe {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        input_dim: usize,
        num_experts: usize,
        expert_hidden: usize,
        expert_dim: usize,
        tower_hidden: usize,
        num_tasks: usize,
    ) -> Result<Self> {
        if num_experts == 0 || num_tasks == 0 {
            return Err(ModelError::Config("need at least one expert and one task".into()));
        }
        let mut dims = vec![input_dim];
        if expert_hidden > 0 {
            dims.push(expert_hidden);
        }
        dims.push(expert_dim);
        let experts = (0..num_experts)
            .map(|i| Mlp::new(store, &format!("mmoe.expert{i}"), &dims, Activation::Relu))
            .collect::<ppm_core::Result<_>>()?;
        let gates = (0..num_tasks)
            .map(|k| Linear::new(store, &format!("mmoe.gate{k}"), input_dim, num_experts, true))
            .collect::<ppm_core::Result<_>>()?;
        let towers = (0..num_tasks)
            .map(|k| Mlp::new(store, &format!("mmoe.tower{k}"), &[expert_dim, tower_hidden, 1], Activation::Relu))
            .collect::<ppm_core::Result<_>>()?;
        Ok(Mmoe { experts, gates, towers })
    }

    /// `g^k = softmax(x W^k + b^k)`, `f^k = sum_i g^k_i f_i(x)`,
    /// `y^k = sigmoid(t^k(f^k))`. Expert outputs pass through a ReLU.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<MmoeOutput> {
        let mut experts = Vec::with_capacity(self.experts.len());
        for e in &self.experts {
            let h = e.forward(g, x)?;
            experts.push(g.relu(h));
        }
        let mut out = MmoeOutput { probs: Vec::new(), gates: Vec::new(), experts, mixtures: Vec::new() };
        for (gate, tower) in self.gates.iter().zip(&self.towers) {
            let logits = gate.forward(g, x)?;
            let w = g.softmax_rows(logits);
            let mix = g.mixture(w, &out.experts)?;
            let logit = tower.forward(g, mix)?;
            out.probs.push(g.sigmoid(logit));
            out.gates.push(w);
            out.mixtures.push(mix);
        }
        Ok(out)
    }
}

/// `sum_k w_k * BCE(p_k, y_k)`.
pub fn multitask_loss<T: Scalar>(g: &mut Graph<T>, probs: &[Var], labels: &[Labels], weights: &[f64]) -> Result<Var> {
    if labels.is_empty() {
        return Err(ModelError::Invalid("empty batch".into()));
    }
    if probs.len() != weights.len() || probs.len() > 3 {
        return Err(ModelError::Invalid(format!("{} task outputs, {} weights", probs.len(), weights.len())));
    }
    let mut total: Option<Var> = None;
    for (k, (&p, &w)) in probs.iter().zip(weights).enumerate() {
        let y: Vec<f64> = labels
            .iter()
            .map(|l| match k {
                0 => l.click,
                1 => l.order,
                _ => l.cart,
            } as f64)
            .collect();
        let bce = g.bce(p, &y)?;
        let term = g.scale(bce, w);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| ModelError::Invalid("no tasks".into()))
}

/// Switches that remove inputs from the fusion vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Replace `U_MO` and `I_MO` by zeros; the plug-in branch is not run.
    pub plugin: bool,
    /// Replace `D` by zeros.
    pub context: bool,
}

/// Layers of the ranking model; parameter values live in the store.
#[derive(Clone, Debug)]
pub struct UrmNet {
    pub arch: Arch,
    pub catalog: IdCatalog,
    pub idsm: Option<Idsm>,
    pub plugin: Option<PpmBranch>,
    pub shared: Option<SharedEncoder>,
    pub mmoe: Mmoe,
    pub context_dim: usize,
    pub feature_dim: usize,
    pub ablation: Ablation,
}

impl UrmNet {
    /// The fusion input `x`, one row per sample.
    pub fn fusion_input<T: Scalar>(&self, g: &mut Graph<T>, batch: &Batch, lookup: &dyn FeatureLookup) -> Result<Var> {
        let n = batch.len();
        let mut parts = Vec::with_capacity(5);
        match self.arch {
            Arch::Unified { .. } => {
                let idsm = self.idsm.as_ref().expect("unified wiring has an IDSM");
                let users = idsm.encode_users(g, &self.catalog, batch)?;
                parts.push(g.gather_rows(users, &batch.group)?);
                parts.push(idsm.ids.embed(g, &self.catalog, &batch.targets)?);
                if let Some(branch) = &self.plugin {
                    if self.ablation.plugin {
                        let d = branch.model_dim;
                        parts.push(g.constant(n, 2 * d, vec![T::zero(); n * 2 * d])?);
                    } else {
                        let users = branch.encode_users(g, batch, lookup)?;
                        parts.push(g.gather_rows(users, &batch.group)?);
                        parts.push(branch.encode_items(g, &batch.targets, lookup)?);
                    }
                }
            }
            Arch::Shared => {
                let shared = self.shared.as_ref().expect("shared wiring has a shared encoder");
                let users = shared.encode_users(g, &self.catalog, batch, lookup)?;
                parts.push(g.gather_rows(users, &batch.group)?);
                parts.push(shared.encode_items(g, &self.catalog, &batch.targets, lookup)?);
            }
        }
        if batch.context_dim != self.context_dim {
            return Err(ModelError::Invalid(format!(
                "context has dim {}, model expects {}",
                batch.context_dim, self.context_dim
            )));
        }
        let ctx: Vec<T> = if self.ablation.context {
            vec![T::zero(); batch.context.len()]
        } else {
            batch.context.iter().map(|&v| T::of(v as f64)).collect()
        };
        parts.push(g.constant(n, self.context_dim, ctx)?);
        Ok(g.concat_cols(&parts)?)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, batch: &Batch, lookup: &dyn FeatureLookup) -> Result<MmoeOutput> {
        let x = self.fusion_input(g, batch, lookup)?;
        self.mmoe.forward(g, x)
    }

    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        batch: &Batch,
        lookup: &dyn FeatureLookup,
        weights: &[f64],
    ) -> Result<Var> {
        let out = self.forward(g, batch, lookup)?;
        multitask_loss(g, &out.probs, &batch.labels, weights)
    }
}

pub struct UrmModel {
    pub store: ParamStore<f32>,
    pub net: UrmNet,
    pub config: UrmConfig,
    /// Mode of the last [`UrmModel::plugin_load`], if any.
    pub plugin_mode: Option<PluginMode>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UrmReport {
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
}

/// Plug-in parameters: the PPM branch without its CTR head.
pub fn is_plugin_param(name: &str) -> bool {
    name.starts_with("ppm.") && !name.starts_with("ppm.ctr_head.")
}

impl UrmModel {
    pub fn new(
        arch: Arch,
        catalog: IdCatalog,
        feature_dim: usize,
        context_dim: usize,
        config: &UrmConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let (mut idsm, mut plugin, mut shared) = (None, None, None);
        let x_dim = match arch {
            Arch::Unified { plugin: with_plugin } => {
                idsm = Some(Idsm::new(&mut store, &catalog, config)?);
                if with_plugin {
                    plugin = Some(PpmBranch::new(&mut store, feature_dim, &config.ppm)?);
                    8 * config.id_dim + 2 * config.ppm.model_dim
                } else {
                    8 * config.id_dim
                }
            }
            Arch::Shared => {
                shared = Some(SharedEncoder::new(&mut store, &catalog, feature_dim, config)?);
                2 * (4 * config.id_dim + config.ppm.model_dim)
            }
        } + context_dim;
        let mmoe = Mmoe::new(
            &mut store,
            x_dim,
            config.num_experts,
            config.expert_hidden,
            config.expert_dim,
            config.tower_hidden,
            TASKS.len(),
        )?;
        let net = UrmNet {
            arch,
            catalog,
            idsm,
            plugin,
            shared,
            mmoe,
            context_dim,
            feature_dim,
            ablation: Ablation::default(),
        };
        Ok(UrmModel { store, net, config: config.clone(), plugin_mode: None })
    }

    /// Prepares the plug-in branch.
    ///
    /// * `RandomInit`: keeps the fresh initialization; trainable.
    /// * `Frozen`: loads the checkpoint's `ppm.*` tensors (except the CTR
    ///   head) and marks them not trainable.
    /// * `Finetune`: loads them and keeps them trainable.
    pub fn plugin_load(&mut self, ckpt: Option<&Checkpoint>, mode: PluginMode) -> Result<()> {
        if self.net.plugin.is_none() {
            return Err(ModelError::Config("this wiring has no plug-in branch".into()));
        }
        match mode {
            PluginMode::RandomInit => {}
            PluginMode::Frozen | PluginMode::Finetune => {
                let ckpt = ckpt.ok_or_else(|| ModelError::Config(format!("{mode:?} needs a PPM checkpoint")))?;
                ckpt.expect_magic(PPM_MAGIC)?;
                ckpt.load_into(&mut self.store, is_plugin_param)?;
            }
        }
        self.store.set_trainable_prefix("ppm.", mode != PluginMode::Frozen);
        self.plugin_mode = Some(mode);
        Ok(())
    }

    /// Removes inputs from the fusion vector. An ablated branch cannot be
    /// trained, so it is frozen as well.
    pub fn set_ablation(&mut self, ablation: Ablation) {
        self.net.ablation = ablation;
        if ablation.plugin {
            self.store.set_trainable_prefix("ppm.", false);
        }
    }

    pub fn checkpoint(&self, metadata: Metadata) -> Checkpoint {
        Checkpoint::from_store(URM_MAGIC, &self.store, |_| true, metadata)
    }

    /// Restores all parameters from a URM checkpoint of the same wiring.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.expect_magic(URM_MAGIC)?;
        ckpt.load_into(&mut self.store, |_| true)?;
        Ok(())
    }

    pub fn fit(&mut self, dataset: &Dataset, train: &[Sample], lookup: &dyn FeatureLookup, seed: u64) -> Result<UrmReport> {
        if self.net.arch != (Arch::Unified { plugin: false }) && lookup.dim() != self.net.feature_dim {
            return Err(ModelError::Invalid(format!(
                "features have dim {}, model expects {}",
                lookup.dim(),
                self.net.feature_dim
            )));
        }
        let cfg = self.config.clone();
        let mut report = UrmReport::default();
        let mut trainer = Trainer::new("urm train", cfg.lr_start);
        if self.plugin_mode == Some(PluginMode::Finetune) {
            trainer.adam.set_lr_scale("ppm.", cfg.plugin_lr_scale);
        }
        let steps_per_epoch = make_batches(dataset, train, cfg.batch_size, cfg.limits(), None)?.len();
        let total = steps_per_epoch * cfg.epochs;
        for epoch in 0..cfg.epochs {
            let batches = make_batches(dataset, train, cfg.batch_size, cfg.limits(), Some(seed.wrapping_add(epoch as u64)))?;
            let (mut sum, mut n) = (0.0, 0usize);
            for batch in &batches {
                let lr = linear_lr(cfg.lr_start, cfg.lr_end, trainer.step, total);
                let net = &self.net;
                let loss = trainer.step(&mut self.store, lr, |g| net.loss(g, batch, lookup, &cfg.task_weights))?;
                sum += loss * batch.len() as f64;
                n += batch.len();
            }
            report.epoch_loss.push(sum / n.max(1) as f64);
        }
        report.steps = trainer.step as u64;
        Ok(report)
    }

    /// `[click, order, cart]` probabilities per sample, in input order.
    pub fn predict(&self, dataset: &Dataset, samples: &[Sample], lookup: &dyn FeatureLookup) -> Result<Vec<[f32; 3]>> {
        let mut out = vec![[0.0; 3]; samples.len()];
        for batch in make_batches(dataset, samples, 1024, self.config.limits(), None)? {
            let mut g = Graph::new(&self.store);
            let o = self.net.forward(&mut g, &batch, lookup)?;
            for k in 0..TASKS.len() {
                for (&i, &v) in batch.sample_index.iter().zip(g.value(o.probs[k])) {
                    out[i][k] = v;
                }
            }
        }
        Ok(out)
    }

    /// Pooled plug-in user vectors for `batch`, `[sequences x d]`.
    pub fn plugin_users(&self, batch: &Batch, lookup: &dyn FeatureLookup) -> Result<Vec<f32>> {
        let branch = self.net.plugin.as_ref().ok_or_else(|| ModelError::Config("no plug-in branch".into()))?;
        let mut g = Graph::new(&self.store);
        let u = branch.encode_users(&mut g, batch, lookup)?;
        Ok(g.value(u).to_vec())
    }

}
