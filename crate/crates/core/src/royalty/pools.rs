use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::RoyaltyError;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RevenueSource {
    Subscription,
    Advertisement,
    Licensing,
    #[serde(untagged)]
    Custom(String),
}

impl fmt::Display for RevenueSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RevenueSource::Subscription => f.write_str("subscription"),
            RevenueSource::Advertisement => f.write_str("advertisement"),
            RevenueSource::Licensing => f.write_str("licensing"),
            RevenueSource::Custom(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevenueRecord {
    pub source: RevenueSource,
    #[serde(default)]
    pub region: Option<String>,
    /// `YYYY-MM`
    pub period: String,
    pub amount_cents: i64,
}

/// Which buckets revenue is pooled by. An empty region list pools each source
/// globally and ignores record regions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoolConfig {
    pub sources: Vec<RevenueSource>,
    pub regions: Vec<String>,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            sources: vec![RevenueSource::Subscription, RevenueSource::Advertisement],
            regions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevenuePool {
    pub pool_id: String,
    pub source: RevenueSource,
    pub region: Option<String>,
    pub amount_cents: u64,
    pub period: String,
}

pub(crate) fn validate_period(period: &str) -> Result<(), RoyaltyError> {
    let ok = period.len() == 7 && NaiveDate::parse_from_str(&format!("{period}-01"), "%Y-%m-%d").is_ok();
    if ok {
        Ok(())
    } else {
        Err(RoyaltyError::InvalidPeriod(period.to_string()))
    }
}

/// One pool per (period, source, region) bucket, for every period present in
/// the records; pools are ordered by period, then configuration order.
pub fn build_pools(records: &[RevenueRecord], config: &PoolConfig) -> Result<Vec<RevenuePool>, RoyaltyError> {
    let regions: Vec<Option<String>> = if config.regions.is_empty() {
        vec![None]
    } else {
        config.regions.iter().cloned().map(Some).collect()
    };
    let mut sums: BTreeMap<(String, usize, usize), u64> = BTreeMap::new();
    let mut periods = BTreeSet::new();
    for (index, r) in records.iter().enumerate() {
        validate_period(&r.period)?;
        let amount = u64::try_from(r.amount_cents).map_err(|_| RoyaltyError::NegativeAmount {
            index,
            amount: r.amount_cents,
        })?;
        let unknown = || RoyaltyError::UnknownBucket {
            index,
            source_name: r.source.to_string(),
            region: r.region.clone(),
        };
        let s = config.sources.iter().position(|s| s == &r.source).ok_or_else(unknown)?;
        let g = if config.regions.is_empty() {
            0
        } else {
            regions.iter().position(|g| g == &r.region).ok_or_else(unknown)?
        };
        periods.insert(r.period.clone());
        *sums.entry((r.period.clone(), s, g)).or_insert(0) += amount;
    }
    let mut pools = Vec::new();
    for period in periods {
        for (s, source) in config.sources.iter().enumerate() {
            for (g, region) in regions.iter().enumerate() {
                pools.push(RevenuePool {
                    pool_id: format!("{period}/{source}/{}", region.as_deref().unwrap_or("global")),
                    source: source.clone(),
                    region: region.clone(),
                    amount_cents: sums.get(&(period.clone(), s, g)).copied().unwrap_or(0),
                    period: period.clone(),
                });
            }
        }
    }
    Ok(pools)
}
