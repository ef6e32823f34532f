//! Training-side code: reference classifier, Shapley channel importance and
//! hypernetwork fitting. Only the cloud links this crate.

pub mod adam;
pub mod classifier;
pub mod hypertrain;
pub mod shapley;

use secdood_core::features::FeatureError;
use secdood_core::hypernet::HyperNetError;
use secdood_core::mask::MaskError;
use secdood_core::scores::ScoreError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("empty {0}")]
    EmptyDataset(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("exact Shapley values need 1..={max} channels, got {channels}")]
    TooManyChannels { channels: usize, max: usize },
    #[error("value function returned a non-finite value for subset {subset:?}")]
    NonFiniteValue { subset: Vec<usize> },
    #[error("at least one permutation is required")]
    NoPermutations,
    #[error("invalid option {name}: {reason}")]
    BadOption { name: &'static str, reason: String },
    #[error(transparent)]
    HyperNet(#[from] HyperNetError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}
