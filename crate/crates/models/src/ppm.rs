//! The pre-trained CTR model: a transformer over the modal features of a
//! user's clicked items, pooled into a user vector and scored against the
//! projected features of the target item.

use ppm_core::{
    Activation, EncoderConfig, Graph, Linear, Mlp, ParamId, ParamStore, Scalar, SeqBatch, TransformerEncoder, Var,
    INIT_STD,
};
use ppm_data::{Dataset, Sample};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, Metadata, PPM_MAGIC};
use crate::error::{ModelError, Result};
use crate::features::FeatureLookup;
use crate::seq::{make_batches, Batch, SeqLimits, RECENCY_BUCKETS};
use crate::train::{linear_lr, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpmConfig {
    pub model_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    /// Rows of the display-position table.
    pub max_position: usize,
    pub head_hidden: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
}

impl Default for PpmConfig {
    fn default() -> Self {
        PpmConfig {
            model_dim: 32,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 64,
            max_seq_len: 50,
            max_position: 50,
            head_hidden: 64,
            batch_size: 256,
            epochs: 8,
            lr_start: 2e-3,
            lr_end: 5e-4,
        }
    }
}

impl PpmConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            model_dim: self.model_dim,
            ffn_dim: self.ffn_dim,
            max_seq_len: self.max_seq_len,
        }
    }

    pub fn limits(&self) -> SeqLimits {
        SeqLimits { max_seq_len: self.max_seq_len, max_position: self.max_position }
    }
}

/// Sequence of constant feature rows as a graph node.
pub(crate) fn feature_matrix<T: Scalar>(g: &mut Graph<T>, lookup: &dyn FeatureLookup, ids: &[u32]) -> Result<Var> {
    let data = lookup.gather(ids)?;
    Ok(g.constant(ids.len(), lookup.dim(), data.into_iter().map(|v| T::of(v as f64)).collect())?)
}

/// The part of the model that is plugged into the ranking model: embedding
/// tables and the behavior transformer. All parameter names start with `ppm.`.
#[derive(Clone, Debug)]
pub struct PpmBranch {
    pub modal_projection: Linear,
    pub position: ParamId,
    pub recency: ParamId,
    pub encoder: TransformerEncoder,
    pub feature_dim: usize,
    pub model_dim: usize,
}

impl PpmBranch {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, feature_dim: usize, cfg: &PpmConfig) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(PpmBranch {
            modal_projection: Linear::new(store, "ppm.modal_projection", feature_dim, d, false)?,
            position: store.gaussian("ppm.position", &[cfg.max_position, d], INIT_STD)?,
            recency: store.gaussian("ppm.recency", &[RECENCY_BUCKETS, d], INIT_STD)?,
            encoder: TransformerEncoder::new(store, "ppm.encoder", cfg.encoder())?,
            feature_dim,
            model_dim: d,
        })
    }

    /// `modal_projection(features) + position[pos] + recency[rec]`, summed
    /// in that order.
    pub fn compose<T: Scalar>(&self, g: &mut Graph<T>, features: Var, positions: &[usize], recency: &[usize]) -> Result<Var> {
        let modal = self.modal_projection.forward(g, features)?;
        let pos = g.embedding(self.position, positions)?;
        let rec = g.embedding(self.recency, recency)?;
        let e = g.add(modal, pos)?;
        Ok(g.add(e, rec)?)
    }

    /// One pooled user vector per sequence of `batch`.
    pub fn encode_users<T: Scalar>(&self, g: &mut Graph<T>, batch: &Batch, lookup: &dyn FeatureLookup) -> Result<Var> {
        let feats = feature_matrix(g, lookup, &batch.seq_items)?;
        let h0 = self.compose(g, feats, &batch.positions, &batch.recency)?;
        let seqs = SeqBatch::packed(&batch.lengths)?;
        let h = self.encoder.forward(g, h0, &seqs)?;
        user_representation(g, h, &seqs)
    }

    /// Projected modal features of the target items.
    pub fn encode_items<T: Scalar>(&self, g: &mut Graph<T>, items: &[u32], lookup: &dyn FeatureLookup) -> Result<Var> {
        let feats = feature_matrix(g, lookup, items)?;
        Ok(self.modal_projection.forward(g, feats)?)
    }
}

/// Mean of the unmasked last-layer states of each sequence.
pub fn user_representation<T: Scalar>(g: &mut Graph<T>, h: Var, seqs: &SeqBatch) -> Result<Var> {
    Ok(g.segment_mean(h, seqs)?)
}

/// Mean binary cross-entropy with clamped probabilities.
pub fn ctr_loss<T: Scalar>(g: &mut Graph<T>, probs: Var, labels: &[f64]) -> Result<Var> {
    if labels.is_empty() {
        return Err(ModelError::Invalid("empty batch".into()));
    }
    Ok(g.bce(probs, labels)?)
}

fn ctr_forward<T: Scalar>(head: &Mlp, g: &mut Graph<T>, users: Var, targets: Var) -> Result<Var> {
    let x = g.concat_cols(&[users, targets])?;
    let logit = head.forward(g, x)?;
    Ok(g.sigmoid(logit))
}

fn forward<T: Scalar>(
    branch: &PpmBranch,
    head: &Mlp,
    g: &mut Graph<T>,
    batch: &Batch,
    lookup: &dyn FeatureLookup,
) -> Result<Var> {
    let users = branch.encode_users(g, batch, lookup)?;
    let users = g.gather_rows(users, &batch.group)?;
    let targets = branch.encode_items(g, &batch.targets, lookup)?;
    ctr_forward(head, g, users, targets)
}

pub struct PpmModel {
    pub store: ParamStore<f32>,
    pub branch: PpmBranch,
    pub ctr_head: Mlp,
    pub config: PpmConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_loss: Vec<f64>,
    pub valid_auc: Vec<Option<f64>>,
    pub steps: u64,
}

impl PpmModel {
    pub fn new(feature_dim: usize, config: &PpmConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(seed);
        let branch = PpmBranch::new(&mut store, feature_dim, config)?;
        let d = config.model_dim;
        let h = config.head_hidden;
        let ctr_head = Mlp::new(&mut store, "ppm.ctr_head", &[2 * d, h, h, 1], Activation::Relu)?;
        Ok(PpmModel { store, branch, ctr_head, config: config.clone() })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, feature_dim: usize, config: &PpmConfig) -> Result<Self> {
        ckpt.expect_magic(PPM_MAGIC)?;
        let mut m = Self::new(feature_dim, config, 0)?;
        ckpt.load_into(&mut m.store, |_| true)?;
        Ok(m)
    }

    pub fn checkpoint(&self, metadata: Metadata) -> Checkpoint {
        Checkpoint::from_store(PPM_MAGIC, &self.store, |_| true, metadata)
    }

    /// `sigmoid(head([user | target]))`, one row per pair.
    pub fn ctr_forward<T: Scalar>(&self, g: &mut Graph<T>, users: Var, targets: Var) -> Result<Var> {
        ctr_forward(&self.ctr_head, g, users, targets)
    }

    /// Click probabilities for every sample of `batch`, `[n x 1]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, batch: &Batch, lookup: &dyn FeatureLookup) -> Result<Var> {
        forward(&self.branch, &self.ctr_head, g, batch, lookup)
    }

    pub fn loss<T: Scalar>(&self, g: &mut Graph<T>, batch: &Batch, lookup: &dyn FeatureLookup) -> Result<Var> {
        let p = self.forward(g, batch, lookup)?;
        ctr_loss(g, p, &batch.clicks())
    }

    /// Click probability per sample, in the order of `samples`.
    pub fn predict(&self, dataset: &Dataset, samples: &[Sample], lookup: &dyn FeatureLookup) -> Result<Vec<f32>> {
        let mut out = vec![0.0; samples.len()];
        for batch in make_batches(dataset, samples, 1024, self.config.limits(), None)? {
            let mut g = Graph::new(&self.store);
            let p = self.forward(&mut g, &batch, lookup)?;
            for (&i, &v) in batch.sample_index.iter().zip(g.value(p)) {
                out[i] = v;
            }
        }
        Ok(out)
    }

    pub fn click_auc(&self, dataset: &Dataset, samples: &[Sample], lookup: &dyn FeatureLookup) -> Result<Option<f64>> {
        let p = self.predict(dataset, samples, lookup)?;
        let scores: Vec<f64> = p.iter().map(|&v| v as f64).collect();
        let labels: Vec<bool> = samples.iter().map(|s| s.labels.click == 1).collect();
        Ok(ppm_metrics::auc(&scores, &labels).expect("lengths match"))
    }

    /// Trains on click labels with Adam and a linearly decaying learning
    /// rate; continues from the current parameters.
    pub fn fit(
        &mut self,
        dataset: &Dataset,
        train: &[Sample],
        valid: Option<&[Sample]>,
        lookup: &dyn FeatureLookup,
        seed: u64,
    ) -> Result<PretrainReport> {
        if lookup.dim() != self.branch.feature_dim {
            return Err(ModelError::Invalid(format!(
                "features have dim {}, model expects {}",
                lookup.dim(),
                self.branch.feature_dim
            )));
        }
        let cfg = self.config.clone();
        let mut report = PretrainReport::default();
        let mut trainer = Trainer::new("ppm pretrain", cfg.lr_start);
        let steps_per_epoch = make_batches(dataset, train, cfg.batch_size, cfg.limits(), None)?.len();
        let total = steps_per_epoch * cfg.epochs;
        for epoch in 0..cfg.epochs {
            let batches = make_batches(dataset, train, cfg.batch_size, cfg.limits(), Some(seed.wrapping_add(epoch as u64)))?;
            let (mut sum, mut n) = (0.0, 0usize);
            for batch in &batches {
                let lr = linear_lr(cfg.lr_start, cfg.lr_end, trainer.step, total);
                let (branch, head) = (&self.branch, &self.ctr_head);
                let loss = trainer.step(&mut self.store, lr, |g| {
                    let p = forward(branch, head, g, batch, lookup)?;
                    ctr_loss(g, p, &batch.clicks())
                })?;
                sum += loss * batch.len() as f64;
                n += batch.len();
            }
            report.epoch_loss.push(sum / n.max(1) as f64);
            report.valid_auc.push(match valid {
                Some(v) if !v.is_empty() => self.click_auc(dataset, v, lookup)?,
                _ => None,
            });
        }
        report.steps = trainer.step as u64;
        Ok(report)
    }
}
