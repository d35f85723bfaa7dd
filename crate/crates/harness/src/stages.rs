//! The individual steps of the offline workflow, each reading its inputs
//! from and writing its outputs to files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ppm_cache::{build_cache, EncoderVersion, FeatureCache, ModalFeatureEntry};
use ppm_data::{Dataset, Sample};
use ppm_models::checkpoint::{config_hash, Checkpoint, Metadata};
use ppm_models::encoders::{train_encoders, EncoderReport, ModEncConfig, ModalityEncoders};
use ppm_models::ppm::{PpmModel, PretrainReport};
use ppm_models::urm::{IdCatalog, PluginMode, UrmModel, UrmReport};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{HarnessError, Result, StageExt};
use crate::experiment::Variant;
use crate::report::{evaluate, MetricsReport};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// First and last day of a training window, both inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Days {
    pub first: u32,
    pub last: u32,
}

impl Days {
    pub fn one(day: u32) -> Self {
        Days { first: day, last: day }
    }

    pub fn describe(&self) -> String {
        format!("train/days-{}-{}", self.first, self.last)
    }

    /// `None` means the whole training split.
    pub fn select(window: Option<Days>, dataset: &Dataset) -> Vec<Sample> {
        match window {
            Some(d) => dataset.train_days(d.first, d.last),
            None => dataset.train.clone(),
        }
    }
}

fn describe(window: Option<Days>) -> String {
    window.map_or("train/all".into(), |d| d.describe())
}

pub fn generate_data(config: &Config, seed: u64, dir: &Path) -> Result<Dataset> {
    let dataset = ppm_data::generate(&config.data, seed).stage("gen-data")?;
    ppm_data::io::save(&dataset, dir).stage("gen-data")?;
    Ok(dataset)
}

pub fn load_data(dir: &Path, stage: &'static str) -> Result<Dataset> {
    ppm_data::io::load(dir).stage(stage)
}

fn fresh_encoders(config: &Config, dataset: &Dataset, seed: u64) -> Result<ModalityEncoders> {
    Ok(ModalityEncoders::for_catalog(
        &config.encoders,
        &dataset.items,
        config.data.title_vocab,
        config.data.num_entities,
        seed,
    )?)
}

/// Trains the encoders and saves them frozen; `untrained` keeps the
/// initialization (the features of the `Base` variant).
pub fn train_modality_encoders(
    config: &Config,
    dataset: &Dataset,
    seed: u64,
    untrained: bool,
    out: &Path,
) -> Result<EncoderReport> {
    let stage = "train-modenc";
    let (enc, report) = if untrained {
        let cfg = ModEncConfig { qm_epochs: 0, ep_epochs: 0, ..config.encoders.clone() };
        train_encoders(&dataset.queries, &dataset.items, config.data.num_entities, config.data.title_vocab, &cfg, seed)
    } else {
        train_encoders(
            &dataset.queries,
            &dataset.items,
            config.data.num_entities,
            config.data.title_vocab,
            &config.encoders,
            seed,
        )
    }
    .stage(stage)?;
    enc.checkpoint(enc.metadata(report.steps)).save(out).stage(stage)?;
    Ok(report)
}

pub fn load_encoders(config: &Config, dataset: &Dataset, path: &Path, stage: &'static str) -> Result<ModalityEncoders> {
    let ckpt = Checkpoint::load(path).stage(stage)?;
    let mut enc = fresh_encoders(config, dataset, 0).stage(stage)?;
    enc.load(&ckpt).stage(stage)?;
    Ok(enc)
}

#[derive(Serialize, Deserialize)]
struct FeatureLine {
    item_id: u64,
    encoder_version: String,
    feature: Vec<f32>,
}

/// Writes one JSON line per catalog item.
pub fn export_features(config: &Config, dataset: &Dataset, encoders: &Path, out: &Path) -> Result<usize> {
    let stage = "export-features";
    let enc = load_encoders(config, dataset, encoders, stage)?;
    let entries = enc.export_modal_features(&dataset.items).stage(stage)?;
    let mut w = BufWriter::new(File::create(out).map_err(|e| HarnessError::io(out, e))?);
    for e in &entries {
        let line = FeatureLine {
            item_id: e.item_id,
            encoder_version: ppm_cache::hex(&e.encoder_version),
            feature: e.feature.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(|e| HarnessError::io(out, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(out, e))?;
    Ok(entries.len())
}

pub fn read_features(path: &Path) -> Result<Vec<ModalFeatureEntry>> {
    let f = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| HarnessError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let l: FeatureLine = serde_json::from_str(&line)?;
        let bytes = hex::decode(&l.encoder_version)
            .map_err(|e| HarnessError::Config(format!("{}: bad encoder version: {e}", path.display())))?;
        let encoder_version: EncoderVersion = bytes
            .try_into()
            .map_err(|_| HarnessError::Config(format!("{}: encoder version is not 32 bytes", path.display())))?;
        out.push(ModalFeatureEntry { item_id: l.item_id, feature: l.feature, encoder_version });
    }
    Ok(out)
}

pub fn build_feature_cache(features: &Path, out: &Path) -> Result<usize> {
    let stage = "build-cache";
    let entries = read_features(features).stage(stage)?;
    build_cache(out, &entries).stage(stage)?;
    Ok(entries.len())
}

pub fn open_cache(path: &Path, stage: &'static str) -> Result<FeatureCache> {
    FeatureCache::open(path).stage(stage)
}

/// Pretrains the plug-in model on `window`, or continues the checkpoint
/// at `parent`.
pub fn pretrain_ppm(
    config: &Config,
    dataset: &Dataset,
    cache: &Path,
    window: Option<Days>,
    parent: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<PretrainReport> {
    let stage = "pretrain-ppm";
    let features = open_cache(cache, stage)?;
    let (mut model, parent_hash) = match parent {
        Some(p) => {
            let ckpt = Checkpoint::load(p).stage(stage)?;
            check_version(&ckpt.metadata, &features, stage)?;
            (PpmModel::from_checkpoint(&ckpt, features.dim(), &config.urm.ppm).stage(stage)?, Some(ckpt.hash()))
        }
        None => (PpmModel::new(features.dim(), &config.urm.ppm, seed).stage(stage)?, None),
    };
    let train = Days::select(window, dataset);
    if train.is_empty() {
        return Err(HarnessError::Stage { stage, message: format!("no samples in {}", describe(window)) });
    }
    let report = model.fit(dataset, &train, Some(&dataset.test), &features, seed).stage(stage)?;
    let meta = Metadata {
        config_hash: config_hash(&config.urm.ppm),
        window: describe(window),
        steps: report.steps,
        parent: parent_hash,
        encoder_version: Some(ppm_cache::hex(&features.encoder_version())),
        plugin: None,
    };
    model.checkpoint(meta).save(out).stage(stage)?;
    Ok(report)
}

fn check_version(meta: &Metadata, features: &FeatureCache, stage: &'static str) -> Result<()> {
    let have = ppm_cache::hex(&features.encoder_version());
    match &meta.encoder_version {
        Some(v) if *v != have => Err(HarnessError::Stage {
            stage,
            message: format!("checkpoint was trained on encoder {v}, cache holds {have}"),
        }),
        _ => Ok(()),
    }
}

/// Features a variant reads: the cache, or for `Base` the untrained encoders
/// of `seed`.
pub fn variant_features(
    config: &Config,
    dataset: &Dataset,
    variant: Variant,
    cache: Option<&Path>,
    seed: u64,
    stage: &'static str,
) -> Result<FeatureCache> {
    if variant.trained_features() {
        let path = cache.ok_or_else(|| HarnessError::Stage { stage, message: "--cache is required".into() })?;
        open_cache(path, stage)
    } else {
        let enc = fresh_encoders(config, dataset, seed).stage(stage)?;
        let entries = enc.export_modal_features(&dataset.items).stage(stage)?;
        FeatureCache::from_bytes(&ppm_cache::encode(&entries).stage(stage)?).stage(stage)
    }
}

pub struct UrmInputs<'a> {
    pub variant: Variant,
    pub features: &'a FeatureCache,
    /// PPM checkpoint for the frozen and finetune modes.
    pub ppm: Option<&'a Path>,
    /// URM checkpoint to continue from.
    pub init: Option<&'a Path>,
    pub window: Option<Days>,
}

pub fn train_urm(config: &Config, dataset: &Dataset, inputs: &UrmInputs, seed: u64, out: &Path) -> Result<UrmReport> {
    let stage = "train-urm";
    let v = inputs.variant;
    let features = inputs.features;
    let mut model = UrmModel::new(
        v.arch(),
        IdCatalog::from_dataset(dataset),
        features.dim(),
        dataset.config.context_dim,
        &config.urm,
        seed,
    )
    .stage(stage)?;
    let mut parent = None;
    if let Some(p) = inputs.init {
        let ckpt = Checkpoint::load(p).stage(stage)?;
        check_version(&ckpt.metadata, features, stage)?;
        model.load_checkpoint(&ckpt).stage(stage)?;
        parent = Some(ckpt.hash());
    }
    let mut plugin = None;
    if let Some(mode) = v.plugin_mode() {
        let ckpt = if mode == PluginMode::RandomInit {
            None
        } else {
            let path = inputs.ppm.ok_or_else(|| HarnessError::Stage { stage, message: "a PPM checkpoint is required".into() })?;
            let c = Checkpoint::load(path).stage(stage)?;
            check_version(&c.metadata, features, stage)?;
            plugin = Some(c.hash());
            Some(c)
        };
        model.plugin_load(ckpt.as_ref(), mode).stage(stage)?;
    }
    let train = Days::select(inputs.window, dataset);
    if train.is_empty() {
        return Err(HarnessError::Stage { stage, message: format!("no samples in {}", describe(inputs.window)) });
    }
    let report = model.fit(dataset, &train, features, seed).stage(stage)?;
    let meta = Metadata {
        config_hash: config_hash(&config.urm),
        window: describe(inputs.window),
        steps: report.steps,
        parent,
        encoder_version: Some(ppm_cache::hex(&features.encoder_version())),
        plugin,
    };
    model.checkpoint(meta).save(out).stage(stage)?;
    Ok(report)
}

/// Scores the test day with a saved ranking model.
pub fn evaluate_urm(
    config: &Config,
    dataset: &Dataset,
    variant: Variant,
    features: &FeatureCache,
    urm: &Path,
    seed: u64,
) -> Result<MetricsReport> {
    let stage = "eval";
    let ckpt = Checkpoint::load(urm).stage(stage)?;
    check_version(&ckpt.metadata, features, stage)?;
    let mut model = UrmModel::new(
        variant.arch(),
        IdCatalog::from_dataset(dataset),
        features.dim(),
        dataset.config.context_dim,
        &config.urm,
        seed,
    )
    .stage(stage)?;
    model.load_checkpoint(&ckpt).stage(stage)?;
    let preds = model.predict(dataset, &dataset.test, features).stage(stage)?;
    let buckets = ppm_data::split_by_frequency(dataset, &config.experiment.bucket_edges).stage(stage)?;
    evaluate(dataset, &preds, &buckets, ckpt.metadata.steps).stage(stage)
}
