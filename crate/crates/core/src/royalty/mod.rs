//! Attribution-weighted royalty settlement.
//!
//! Revenue is grouped into pools, each pool is split across generated tracks
//! pro rata by eligible streams, the platform keeps its cut of every track,
//! and the rest flows to rightsholders by attribution weight. Every split is
//! in integer cents with largest-remainder rounding (ties to the ascending
//! id), so nothing is lost or created.

mod apportion;
mod pools;
mod settle;
mod usage;
mod weights;

use thiserror::Error;

pub use apportion::{largest_remainder, Apportionment, ShareStep};
pub use pools::{build_pools, PoolConfig, RevenuePool, RevenueRecord, RevenueSource};
pub use settle::{
    pro_rata_allocation, settle, settle_periods, Allocation, PoolBreakdown, RoundingStep, RoyaltyConfig,
    RoyaltyStatement, StatementLine, PLATFORM_ID, UNATTRIBUTED_ID,
};
pub use usage::{count_eligible_streams, read_usage_log, UsageEvent};
pub use weights::{attribution_weights, AttributionWeights, TrackWeights, WeightPolicy};

#[derive(Debug, Error)]
pub enum RoyaltyError {
    #[error("revenue record {index} has negative amount {amount}")]
    NegativeAmount { index: usize, amount: i64 },
    #[error("revenue record {index} falls in no configured pool ({source_name}, {region:?})")]
    UnknownBucket {
        index: usize,
        source_name: String,
        region: Option<String>,
    },
    #[error("invalid period {0:?}; expected YYYY-MM")]
    InvalidPeriod(String),
    #[error("usage log line {line}: {reason}")]
    InvalidUsage { line: usize, reason: String },
    #[error("platform cut {0} outside [0, 1]")]
    InvalidCut(f64),
    #[error("invalid weights for track {track:?}: {reason}")]
    InvalidWeights { track: String, reason: String },
    #[error("pools span several periods: {0:?}")]
    MixedPeriods(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
