//! Model variants and the ablation grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use ppm_cache::FeatureCache;
use ppm_data::{generate, split_by_frequency, subsample, Dataset, FrequencyBuckets};
use ppm_models::checkpoint::{config_hash, Checkpoint, Metadata};
use ppm_models::encoders::{train_encoders, EncoderReport, ModalityEncoders};
use ppm_models::ppm::{PpmModel, PretrainReport};
use ppm_models::urm::{Ablation, Arch, IdCatalog, PluginMode, UrmModel};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{HarnessError, Result};
use crate::report::{evaluate, MetricsReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Shared encoder over ids and features of untrained encoders.
    #[serde(rename = "Base")]
    Base,
    /// Shared encoder over ids and features of the trained encoders.
    #[serde(rename = "Base+QM&EP")]
    QmEp,
    #[serde(rename = "Base+QM&EP+PPM (random initialized)")]
    PpmRandom,
    #[serde(rename = "Base+QM&EP+PPM (frozen)")]
    PpmFrozen,
    #[serde(rename = "Base+QM&EP+PPM (finetune)")]
    PpmFinetune,
    /// The ranking model without the plug-in branch.
    #[serde(rename = "pure-IDRec")]
    PureIdRec,
}

impl Variant {
    /// The five rows of the ablation table, in table order.
    pub const TABLE: [Variant; 5] =
        [Variant::Base, Variant::QmEp, Variant::PpmRandom, Variant::PpmFrozen, Variant::PpmFinetune];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "Base",
            Variant::QmEp => "Base+QM&EP",
            Variant::PpmRandom => "Base+QM&EP+PPM (random initialized)",
            Variant::PpmFrozen => "Base+QM&EP+PPM (frozen)",
            Variant::PpmFinetune => "Base+QM&EP+PPM (finetune)",
            Variant::PureIdRec => "pure-IDRec",
        }
    }

    pub fn arch(self) -> Arch {
        match self {
            Variant::Base | Variant::QmEp => Arch::Shared,
            Variant::PureIdRec => Arch::Unified { plugin: false },
            _ => Arch::Unified { plugin: true },
        }
    }

    pub fn plugin_mode(self) -> Option<PluginMode> {
        match self {
            Variant::PpmRandom => Some(PluginMode::RandomInit),
            Variant::PpmFrozen => Some(PluginMode::Frozen),
            Variant::PpmFinetune => Some(PluginMode::Finetune),
            _ => None,
        }
    }

    /// Whether the variant reads features of the trained encoders.
    pub fn trained_features(self) -> bool {
        self != Variant::Base
    }
}

/// One cell of the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// Share of the training samples kept.
    #[serde(default = "one")]
    pub fraction: f64,
    /// Replace the plug-in branch output by zeros.
    #[serde(default)]
    pub ablate_plugin: bool,
}

fn one() -> f64 {
    1.0
}

impl ExperimentConfig {
    pub fn new(variant: Variant) -> Self {
        ExperimentConfig { variant, fraction: 1.0, ablate_plugin: false }
    }

    pub fn label(&self) -> String {
        let mut s = self.variant.name().to_string();
        if self.fraction != 1.0 {
            write!(s, " @{}%", self.fraction * 100.0).unwrap();
        }
        if self.ablate_plugin {
            s.push_str(" [plug-in zeroed]");
        }
        s
    }
}

/// Everything the variants of one seed share: the world, both feature
/// caches and the pretrained plug-in checkpoint.
pub struct Workbench {
    pub seed: u64,
    pub config: Config,
    pub dataset: Dataset,
    pub buckets: FrequencyBuckets,
    pub encoder_report: EncoderReport,
    pub features: FeatureCache,
    pub raw_features: FeatureCache,
    pub ppm: Checkpoint,
    pub ppm_report: PretrainReport,
}

fn in_memory_cache(encoders: &ModalityEncoders, dataset: &Dataset) -> Result<FeatureCache> {
    let entries = encoders.export_modal_features(&dataset.items)?;
    Ok(FeatureCache::from_bytes(&ppm_cache::encode(&entries)?)?)
}

impl Workbench {
    pub fn prepare(config: &Config, seed: u64) -> Result<Self> {
        let t = Instant::now();
        let dataset = generate(&config.data, seed)?;
        let buckets = split_by_frequency(&dataset, &config.experiment.bucket_edges)?;
        let (encoders, encoder_report) = train_encoders(
            &dataset.queries,
            &dataset.items,
            config.data.num_entities,
            config.data.title_vocab,
            &config.encoders,
            seed,
        )?;
        let features = in_memory_cache(&encoders, &dataset)?;
        let raw = ModalityEncoders::for_catalog(
            &config.encoders,
            &dataset.items,
            config.data.title_vocab,
            config.data.num_entities,
            seed,
        )?;
        let raw_features = in_memory_cache(&raw, &dataset)?;
        log::info!("seed {seed}: data and encoders ready after {:.1}s", t.elapsed().as_secs_f64());

        let mut ppm = PpmModel::new(features.dim(), &config.urm.ppm, seed)?;
        let ppm_report = ppm.fit(&dataset, &dataset.train, None, &features, seed)?;
        let ppm = ppm.checkpoint(Metadata {
            config_hash: config_hash(&config.urm.ppm),
            window: "train/all".into(),
            steps: ppm_report.steps,
            parent: None,
            encoder_version: Some(ppm_cache::hex(&features.encoder_version())),
            plugin: None,
        });
        log::info!("seed {seed}: plug-in pretrained after {:.1}s", t.elapsed().as_secs_f64());
        Ok(Workbench {
            seed,
            config: config.clone(),
            dataset,
            buckets,
            encoder_report,
            features,
            raw_features,
            ppm,
            ppm_report,
        })
    }

    /// Builds the ranking model of `cell`, ready for training.
    pub fn model(&self, cell: &ExperimentConfig) -> Result<UrmModel> {
        let features = self.features_of(cell.variant);
        let mut model = UrmModel::new(
            cell.variant.arch(),
            IdCatalog::from_dataset(&self.dataset),
            features.dim(),
            self.dataset.config.context_dim,
            &self.config.urm,
            self.seed,
        )?;
        if let Some(mode) = cell.variant.plugin_mode() {
            model.plugin_load(Some(&self.ppm), mode)?;
        }
        if cell.ablate_plugin {
            model.set_ablation(Ablation { plugin: true, context: false });
        }
        Ok(model)
    }

    pub fn features_of(&self, variant: Variant) -> &FeatureCache {
        if variant.trained_features() {
            &self.features
        } else {
            &self.raw_features
        }
    }

    /// Trains and evaluates one cell on the test day.
    pub fn run(&self, cell: &ExperimentConfig) -> Result<MetricsReport> {
        let t = Instant::now();
        if !(cell.fraction > 0.0 && cell.fraction <= 1.0) {
            return Err(HarnessError::Config(format!("{}: fraction outside (0, 1]", cell.label())));
        }
        let sub;
        let data = if cell.fraction < 1.0 {
            sub = subsample(&self.dataset, cell.fraction, self.seed ^ 0x5ab5_a3b1e)?;
            &sub
        } else {
            &self.dataset
        };
        let features = self.features_of(cell.variant);
        let mut model = self.model(cell)?;
        let fit = model.fit(data, &data.train, features, self.seed)?;
        let preds = model.predict(&self.dataset, &self.dataset.test, features)?;
        let report = evaluate(&self.dataset, &preds, &self.buckets, fit.steps)?;
        log::info!(
            "seed {}: {} average AUC {:?} after {:.1}s",
            self.seed,
            cell.label(),
            report.average_auc,
            t.elapsed().as_secs_f64()
        );
        Ok(report)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub sd: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, sd, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub cell: ExperimentConfig,
    pub runs: Vec<SeedOutcome>,
    /// Mean and spread of every scalar metric over the successful seeds.
    pub summary: BTreeMap<String, Stat>,
    pub failed: bool,
}

impl AblationRow {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.summary.get(metric).map(|s| s.mean)
    }

    /// Per-seed values of `metric`, in seed order.
    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|r| r.metrics.as_ref())
            .filter_map(|m| m.scalars().get(metric).copied())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// Labels of the rows without failures, best mean average AUC first.
    pub ordering: Vec<String>,
    pub complete: bool,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let fmt = |s: Option<&Stat>| s.map_or("-".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.sd));
        writeln!(
            out,
            "{:<48} {:>17} {:>17} {:>17} {:>17} {:>17}",
            "variant", "avg AUC", "click AUC", "order AUC", "avg P@2", "coldest AUC"
        )
        .unwrap();
        for r in &self.rows {
            let cold = r.summary.iter().find(|(k, _)| k.starts_with("auc/bucket0 ")).map(|(_, s)| s);
            writeln!(
                out,
                "{:<48} {:>17} {:>17} {:>17} {:>17} {:>17}{}",
                r.label,
                fmt(r.summary.get("auc/average")),
                fmt(r.summary.get("auc/click")),
                fmt(r.summary.get("auc/order")),
                fmt(r.summary.get("p@2/average")),
                fmt(cold),
                if r.failed { "  FAILED" } else { "" }
            )
            .unwrap();
        }
        writeln!(out, "ordering: {}", self.ordering.join(" > ")).unwrap();
        out
    }
}

/// Trains every cell of `grid` on every seed of the config. A failing cell
/// is recorded and the grid carries on.
pub fn run_ablation(config: &Config, grid: &[ExperimentConfig]) -> AblationReport {
    let seeds = config.experiment.seeds.clone();
    let mut outcomes: Vec<Vec<SeedOutcome>> = vec![Vec::new(); grid.len()];
    for &seed in &seeds {
        match Workbench::prepare(config, seed) {
            Ok(bench) => {
                for (cell, out) in grid.iter().zip(outcomes.iter_mut()) {
                    out.push(match bench.run(cell) {
                        Ok(m) => SeedOutcome { seed, metrics: Some(m), error: None },
                        Err(e) => {
                            log::error!("seed {seed}: {} failed: {e}", cell.label());
                            SeedOutcome { seed, metrics: None, error: Some(e.to_string()) }
                        }
                    });
                }
            }
            Err(e) => {
                log::error!("seed {seed}: preparation failed: {e}");
                for out in outcomes.iter_mut() {
                    out.push(SeedOutcome { seed, metrics: None, error: Some(format!("preparation: {e}")) });
                }
            }
        }
    }
    let rows: Vec<AblationRow> = grid
        .iter()
        .zip(outcomes)
        .map(|(cell, runs)| {
            let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for m in runs.iter().filter_map(|r| r.metrics.as_ref()) {
                for (k, v) in m.scalars() {
                    per_metric.entry(k).or_default().push(v);
                }
            }
            let summary = per_metric.into_iter().filter_map(|(k, v)| Some((k, Stat::of(&v)?))).collect();
            let failed = runs.iter().any(|r| r.error.is_some());
            AblationRow { label: cell.label(), cell: cell.clone(), runs, summary, failed }
        })
        .collect();
    let mut ranked: Vec<(&AblationRow, f64)> =
        rows.iter().filter(|r| !r.failed).filter_map(|r| Some((r, r.mean("auc/average")?))).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let ordering = ranked.iter().map(|(r, _)| r.label.clone()).collect();
    let complete = rows.iter().all(|r| !r.failed);
    AblationReport { seeds, rows, ordering, complete }
}
