//! Offline training followed by one incremental update.
//!
//! With `T` the test day, the first round pretrains the plug-in model on
//! days `1..=T-3` and trains the ranking model on day `T-2`. The update
//! round continues the plug-in checkpoint on day `T-2` and the ranking
//! model on day `T-1`, loading the updated plug-in. Both rounds are scored
//! on day `T`, which neither has seen.

use std::path::{Path, PathBuf};

use ppm_cache::FeatureCache;
use ppm_models::checkpoint::Checkpoint;
use ppm_models::encoders::EncoderReport;
use ppm_models::ppm::PretrainReport;
use ppm_models::urm::UrmReport;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{HarnessError, Result};
use crate::experiment::Variant;
use crate::report::MetricsReport;
use crate::stages::{self, Days, UrmInputs};

pub const DATA_DIR: &str = "data";
pub const ENCODERS: &str = "encoders.ckpt";
pub const FEATURES: &str = "features.jsonl";
pub const CACHE: &str = "features.cache";
pub const PPM: &str = "ppm.ckpt";
pub const URM: &str = "urm.ckpt";
pub const PPM_UPDATE: &str = "ppm-update.ckpt";
pub const URM_UPDATE: &str = "urm-update.ckpt";
pub const REPORT: &str = "pipeline.json";
pub const METRICS: &str = "metrics.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Windows {
    pub ppm: Days,
    pub urm: Days,
    pub ppm_update: Days,
    pub urm_update: Days,
    pub eval_day: u32,
}

impl Windows {
    pub fn for_days(days: u32) -> Result<Self> {
        if days < 4 {
            return Err(HarnessError::Config(format!("the pipeline needs at least 4 days, got {days}")));
        }
        let t = days;
        Ok(Windows {
            ppm: Days { first: 1, last: t - 3 },
            urm: Days::one(t - 2),
            ppm_update: Days::one(t - 2),
            urm_update: Days::one(t - 1),
            eval_day: t,
        })
    }
}

/// sha256 of every checkpoint and the encoder version of the cache, after
/// the links between them were checked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub encoder_version: String,
    pub encoders: String,
    pub ppm: String,
    pub urm: String,
    pub ppm_update: String,
    pub urm_update: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub seed: u64,
    pub windows: Windows,
    pub encoders: EncoderReport,
    pub ppm: PretrainReport,
    pub urm: UrmReport,
    pub ppm_update: PretrainReport,
    pub urm_update: UrmReport,
    pub before: MetricsReport,
    pub after: MetricsReport,
    pub provenance: Provenance,
}

fn load(dir: &Path, name: &str, stage: &'static str) -> Result<Checkpoint> {
    Checkpoint::load(&dir.join(name)).map_err(|e| HarnessError::Stage { stage, message: format!("{name}: {e}") })
}

fn link(what: &str, got: &Option<String>, want: &str) -> Result<()> {
    match got {
        Some(g) if g == want => Ok(()),
        Some(g) => Err(HarnessError::Provenance(format!("{what} is {g}, expected {want}"))),
        None => Err(HarnessError::Provenance(format!("{what} is missing, expected {want}"))),
    }
}

/// Re-reads the artifacts of a pipeline run and checks that each
/// checkpoint names the one it was built from.
pub fn verify_provenance(dir: &Path) -> Result<Provenance> {
    let stage = "verify";
    let cache = FeatureCache::open(&dir.join(CACHE)).map_err(|e| HarnessError::Stage { stage, message: e.to_string() })?;
    let version = ppm_cache::hex(&cache.encoder_version());
    let enc = load(dir, ENCODERS, stage)?;
    let ppm = load(dir, PPM, stage)?;
    let urm = load(dir, URM, stage)?;
    let ppm2 = load(dir, PPM_UPDATE, stage)?;
    let urm2 = load(dir, URM_UPDATE, stage)?;
    link("encoder checkpoint version", &enc.metadata.encoder_version, &version)?;
    for (name, c) in [(PPM, &ppm), (URM, &urm), (PPM_UPDATE, &ppm2), (URM_UPDATE, &urm2)] {
        link(&format!("{name} encoder version"), &c.metadata.encoder_version, &version)?;
    }
    if ppm.metadata.parent.is_some() {
        return Err(HarnessError::Provenance("the first plug-in checkpoint has a parent".into()));
    }
    link("ranking model plug-in", &urm.metadata.plugin, &ppm.hash())?;
    link("updated plug-in parent", &ppm2.metadata.parent, &ppm.hash())?;
    link("updated ranking model parent", &urm2.metadata.parent, &urm.hash())?;
    link("updated ranking model plug-in", &urm2.metadata.plugin, &ppm2.hash())?;
    Ok(Provenance {
        encoder_version: version,
        encoders: enc.hash(),
        ppm: ppm.hash(),
        urm: urm.hash(),
        ppm_update: ppm2.hash(),
        urm_update: urm2.hash(),
    })
}

fn step(name: &str) {
    log::info!("pipeline: {name}");
}

pub fn run_pipeline(config: &Config, seed: u64, dir: &Path) -> Result<PipelineReport> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let windows = Windows::for_days(config.data.days)?;
    let p = |name: &str| -> PathBuf { dir.join(name) };
    let variant = Variant::PpmFinetune;
    let mut ranking = config.clone();
    ranking.urm.epochs = config.pipeline.urm_epochs;
    let mut update = config.clone();
    update.urm.ppm.epochs = config.pipeline.ppm_update_epochs;
    update.urm.ppm.lr_start = config.urm.ppm.lr_end;

    step("gen-data");
    stages::generate_data(config, seed, &p(DATA_DIR))?;
    let dataset = stages::load_data(&p(DATA_DIR), "gen-data")?;
    step("train-modenc");
    let encoders = stages::train_modality_encoders(config, &dataset, seed, false, &p(ENCODERS))?;
    step("export-features");
    stages::export_features(config, &dataset, &p(ENCODERS), &p(FEATURES))?;
    step("build-cache");
    stages::build_feature_cache(&p(FEATURES), &p(CACHE))?;
    step("pretrain-ppm");
    let ppm = stages::pretrain_ppm(config, &dataset, &p(CACHE), Some(windows.ppm), None, seed, &p(PPM))?;
    let features = stages::open_cache(&p(CACHE), "train-urm")?;
    step("train-urm");
    let inputs = UrmInputs { variant, features: &features, ppm: Some(&p(PPM)), init: None, window: Some(windows.urm) };
    let urm = stages::train_urm(&ranking, &dataset, &inputs, seed, &p(URM))?;
    step("eval");
    let before = stages::evaluate_urm(&ranking, &dataset, variant, &features, &p(URM), seed)?;

    step("update-ppm");
    let ppm_update =
        stages::pretrain_ppm(&update, &dataset, &p(CACHE), Some(windows.ppm_update), Some(&p(PPM)), seed, &p(PPM_UPDATE))?;
    step("update-urm");
    let inputs = UrmInputs {
        variant,
        features: &features,
        ppm: Some(&p(PPM_UPDATE)),
        init: Some(&p(URM)),
        window: Some(windows.urm_update),
    };
    let urm_update = stages::train_urm(&ranking, &dataset, &inputs, seed, &p(URM_UPDATE))?;
    step("eval-update");
    let after = stages::evaluate_urm(&ranking, &dataset, variant, &features, &p(URM_UPDATE), seed)?;

    let provenance = verify_provenance(dir)?;
    let report = PipelineReport {
        seed,
        windows,
        encoders,
        ppm,
        urm,
        ppm_update,
        urm_update,
        before,
        after,
        provenance,
    };
    stages::write_json(&p(REPORT), &report)?;
    let mut lines = report.before.lines("test/before-update");
    lines.extend(report.after.lines("test/after-update"));
    std::fs::write(p(METRICS), lines.join("\n") + "\n").map_err(|e| HarnessError::io(p(METRICS), e))?;
    Ok(report)
}
