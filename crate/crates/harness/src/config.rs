//! Run configuration, read from TOML.
//!
//! Every key is optional; missing keys take the defaults below.
//!
//! ```toml
//! [data]        # world generator (ppm_data::GenConfig)
//! num_items = 10000
//! [encoders]    # text/vision encoders (ppm_models::encoders::ModEncConfig)
//! qm_epochs = 10
//! [urm]         # ranking model (ppm_models::urm::UrmConfig)
//! lr_start = 4e-4
//! [urm.ppm]     # plug-in branch and its pretraining schedule
//! epochs = 8
//! [experiment]  # seeds, frequency buckets, ablation grid
//! seeds = [1, 2, 3]
//! bucket_edges = [5, 20, 100]
//! [pipeline]    # schedules of the offline/incremental workflow
//! urm_epochs = 4
//! ppm_update_epochs = 1
//! ```

use std::path::Path;

use ppm_data::GenConfig;
use ppm_models::encoders::ModEncConfig;
use ppm_models::urm::UrmConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};
use crate::experiment::{ExperimentConfig, Variant};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: GenConfig,
    pub encoders: ModEncConfig,
    pub urm: UrmConfig,
    pub experiment: ExperimentSettings,
    pub pipeline: PipelineSettings,
}

/// Schedules of the pipeline stages, whose windows are single days.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSettings {
    /// Passes over the day of each ranking-model stage.
    pub urm_epochs: usize,
    /// Passes of the plug-in update, run at the final pretraining rate.
    pub ppm_update_epochs: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        PipelineSettings { urm_epochs: 4, ppm_update_epochs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSettings {
    pub seeds: Vec<u64>,
    /// Training-frequency bucket edges for the cold-start breakdown.
    pub bucket_edges: Vec<u64>,
    /// Cells run by `ablation`.
    pub grid: Vec<ExperimentConfig>,
}

impl Default for ExperimentSettings {
    fn default() -> Self {
        let mut grid: Vec<ExperimentConfig> = Variant::TABLE.iter().map(|&v| ExperimentConfig::new(v)).collect();
        grid.push(ExperimentConfig::new(Variant::PureIdRec));
        grid.push(ExperimentConfig { fraction: 0.5, ..ExperimentConfig::new(Variant::PpmFinetune) });
        ExperimentSettings { seeds: vec![1, 2, 3], bucket_edges: vec![5, 20, 100], grid }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.encoders.validate()?;
        if self.urm.ppm.max_seq_len != self.urm.max_seq_len {
            return Err(HarnessError::Config("urm.max_seq_len and urm.ppm.max_seq_len differ".into()));
        }
        if self.pipeline.urm_epochs == 0 || self.pipeline.ppm_update_epochs == 0 {
            return Err(HarnessError::Config("pipeline epochs must be positive".into()));
        }
        if self.experiment.seeds.is_empty() {
            return Err(HarnessError::Config("experiment.seeds is empty".into()));
        }
        for cell in &self.experiment.grid {
            if !(cell.fraction > 0.0 && cell.fraction <= 1.0) {
                return Err(HarnessError::Config(format!("grid fraction {} outside (0, 1]", cell.fraction)));
            }
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        ppm_models::checkpoint::config_hash(self)
    }
}
