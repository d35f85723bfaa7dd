//! Synthetic e-commerce data for pre-training and ranking experiments.
//!
//! [`generate`] draws a catalog whose items carry a hidden content vector,
//! titles and image features derived from it, and a chronological stream of
//! recommendation requests whose clicks depend on that content. Splits are by
//! time: the last day is the test set.

mod config;
mod error;
mod generate;
pub mod io;
mod ops;
mod types;

pub use config::GenConfig;
pub use error::{DataError, Result};
pub use generate::generate;
pub use ops::{split_by_frequency, subsample, FrequencyBuckets};
pub use types::{
    BehaviorSequence, Dataset, Event, ItemRecord, Labels, QueryItemPair, Request, Sample, Split,
    SECONDS_PER_DAY, WINDOW_START,
};
