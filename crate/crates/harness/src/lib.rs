//! Evaluation, experiments and the offline workflow on top of the models.
//!
//! * [`report`]: AUC, P@2, frequency-bucket AUC and simulated UCTR/UCVR.
//! * [`experiment`]: the model variants and the ablation grid.
//! * [`stages`] and [`pipeline`]: file-based training steps and the
//!   offline-plus-incremental workflow built from them.
//! * [`run`]: run directories and their manifests, used by the `ppm` binary.

pub mod config;
mod error;
pub mod experiment;
pub mod pipeline;
pub mod report;
pub mod run;
pub mod stages;

pub use config::{Config, ExperimentSettings, PipelineSettings};
pub use error::{HarnessError, Result, StageExt};
pub use experiment::{run_ablation, AblationReport, ExperimentConfig, Variant, Workbench};
pub use pipeline::{run_pipeline, verify_provenance, PipelineReport};
pub use ppm_metrics::{auc, precision_at_n, uctr_ucvr, MetricError, Ranked, UserDay};
pub use report::{evaluate, MetricsReport};
