//! Models trained on [`ppm_data`] worlds.
//!
//! * [`encoders`]: surrogate text and vision encoders trained with query
//!   matching and entity prediction, then frozen to export modal features.
//! * [`ppm`]: the ID-free behavior transformer with a CTR head, trained on
//!   clicks and saved as a checkpoint.
//! * [`urm`]: the ranking model combining an ID sequence module, the
//!   pre-trained plug-in branch and a multi-gate mixture of experts.

pub mod checkpoint;
pub mod encoders;
mod error;
pub mod features;
pub mod ppm;
pub mod seq;
pub mod train;
pub mod urm;

pub use error::{ModelError, Result};
