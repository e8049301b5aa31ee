//! Attribution quality: rank correlation against retraining, and style
//! similarity of top-attributed works.

mod correlation;
mod lds;
mod style;

use thiserror::Error;

use crate::attribution::AttributionError;
use crate::model::ModelError;

pub use correlation::{average_ranks, pearson_correlation, spearman_rank_correlation};
pub use lds::{lds_evaluate, lds_from_influences, LdsReport, RetrainCache, SubsetPlan, TargetRho};
pub use style::{
    style_features, style_similarity_by_rank, BucketStat, Feature, StyleFeatures, StyleReport,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {min} values, got {len}")]
    TooShort { len: usize, min: usize },
    #[error("invalid subset plan: {0}")]
    InvalidPlan(String),
    #[error("{what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
