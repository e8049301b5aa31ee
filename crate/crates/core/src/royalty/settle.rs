use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::apportion::{largest_remainder, Apportionment};
use super::pools::{PoolConfig, RevenuePool};
use super::usage::{count_eligible_streams, UsageEvent};
use super::weights::{AttributionWeights, TrackWeights, WeightPolicy};
use super::RoyaltyError;

/// Statement row id for the platform's share.
pub const PLATFORM_ID: &str = "<platform>";
/// Statement row id for revenue no rightsholder could be credited with.
pub const UNATTRIBUTED_ID: &str = "<unattributed>";

/// Real-valued weights and cuts become integer parts per `WEIGHT_SCALE`.
const WEIGHT_SCALE: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoyaltyConfig {
    pub pools: PoolConfig,
    pub platform_cut: f64,
    /// Minimum play length of an eligible stream.
    pub min_seconds: f64,
    pub weight_policy: WeightPolicy,
}

impl Default for RoyaltyConfig {
    fn default() -> Self {
        RoyaltyConfig {
            pools: PoolConfig::default(),
            platform_cut: 0.3,
            min_seconds: 30.0,
            weight_policy: WeightPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Allocation {
    pub per_track: BTreeMap<String, u64>,
    /// Cents no track received (no eligible streams at all).
    pub unallocated: u64,
    pub step: Option<Apportionment>,
}

/// Splits a pool across tracks in proportion to stream counts.
pub fn pro_rata_allocation(pool_amount: u64, counts: &BTreeMap<String, u64>) -> Allocation {
    let weights: Vec<(String, u128)> = counts.iter().map(|(t, &c)| (t.clone(), u128::from(c))).collect();
    match largest_remainder(pool_amount, &weights) {
        Some(step) => Allocation {
            per_track: step.shares.iter().map(|s| (s.id.clone(), s.amount)).collect(),
            unallocated: 0,
            step: Some(step),
        },
        None => Allocation {
            per_track: counts.keys().map(|t| (t.clone(), 0)).collect(),
            unallocated: pool_amount,
            step: None,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Pool across tracks by streams.
    Pool,
    /// Track revenue between platform and rights.
    Platform,
    /// Rights revenue across rightsholders by weight.
    Rightsholders,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundingStep {
    pub pool_id: String,
    pub stage: Stage,
    pub track_id: Option<String>,
    pub apportionment: Apportionment,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolBreakdown {
    pub pool_id: String,
    pub amount_cents: u64,
    pub platform_cents: u64,
    pub rightsholder_cents: u64,
    pub unattributed_cents: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementLine {
    pub pool_id: String,
    pub rightsholder_id: String,
    pub amount_cents: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoyaltyStatement {
    pub period: String,
    pub pools: Vec<PoolBreakdown>,
    /// Non-zero rightsholder amounts per pool, ordered by pool then id.
    pub lines: Vec<StatementLine>,
    pub platform_amount: u64,
    pub unattributed_amount: u64,
    pub audit: Vec<RoundingStep>,
}

impl RoyaltyStatement {
    pub fn pool_total(&self) -> u64 {
        self.pools.iter().map(|p| p.amount_cents).sum()
    }

    pub fn rightsholder_total(&self) -> u64 {
        self.lines.iter().map(|l| l.amount_cents).sum()
    }

    /// Totals per rightsholder over all pools.
    pub fn totals(&self) -> BTreeMap<String, u64> {
        let mut out = BTreeMap::new();
        for l in &self.lines {
            *out.entry(l.rightsholder_id.clone()).or_insert(0) += l.amount_cents;
        }
        out
    }

    pub fn is_conserved(&self) -> bool {
        self.rightsholder_total() + self.platform_amount + self.unattributed_amount == self.pool_total()
    }

    /// `period,pool_id,rightsholder_id,amount_cents`, with platform and
    /// unattributed rows for every pool.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), RoyaltyError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["period", "pool_id", "rightsholder_id", "amount_cents"])?;
        for pool in &self.pools {
            for l in self.lines.iter().filter(|l| l.pool_id == pool.pool_id) {
                w.write_record([&self.period, &l.pool_id, &l.rightsholder_id, &l.amount_cents.to_string()])?;
            }
            w.write_record([&self.period, &pool.pool_id, PLATFORM_ID, &pool.platform_cents.to_string()])?;
            w.write_record([&self.period, &pool.pool_id, UNATTRIBUTED_ID, &pool.unattributed_cents.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// The whole statement, including every rounding step, as pretty JSON.
    pub fn write_audit_json<W: Write>(&self, writer: W) -> Result<(), RoyaltyError> {
        serde_json::to_writer_pretty(writer, self)?;
        Ok(())
    }
}

fn scaled(x: f64) -> u128 {
    (x * WEIGHT_SCALE).round() as u128
}

fn check_weights(track: &str, weights: &TrackWeights) -> Result<(), RoyaltyError> {
    let TrackWeights::Weighted(ws) = weights else {
        return Ok(());
    };
    let invalid = |reason: String| RoyaltyError::InvalidWeights {
        track: track.to_string(),
        reason,
    };
    if let Some((id, w)) = ws.iter().find(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
        return Err(invalid(format!("weight {w} for {id:?}")));
    }
    let sum: f64 = ws.iter().map(|p| p.1).sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("weights sum to {sum}")));
    }
    let ids: BTreeSet<&String> = ws.iter().map(|p| &p.0).collect();
    if ids.len() != ws.len() {
        return Err(invalid("duplicate payee".into()));
    }
    Ok(())
}

/// Settles the pools of one period.
///
/// Tracks with streams but no usable weights send their rights share to the
/// unattributed line; so does a pool nobody streamed from.
pub fn settle(
    pools: &[RevenuePool],
    stream_counts: &BTreeMap<String, u64>,
    weights: &AttributionWeights,
    platform_cut: f64,
) -> Result<RoyaltyStatement, RoyaltyError> {
    if !(0.0..=1.0).contains(&platform_cut) {
        return Err(RoyaltyError::InvalidCut(platform_cut));
    }
    let periods: BTreeSet<&String> = pools.iter().map(|p| &p.period).collect();
    if periods.len() > 1 {
        return Err(RoyaltyError::MixedPeriods(periods.into_iter().cloned().collect()));
    }
    for (track, w) in weights {
        check_weights(track, w)?;
    }
    let cut = scaled(platform_cut);
    let platform_split = [("platform".to_string(), cut), ("rights".to_string(), scaled(1.0) - cut)];

    let mut statement = RoyaltyStatement {
        period: periods.into_iter().next().cloned().unwrap_or_default(),
        pools: Vec::with_capacity(pools.len()),
        lines: Vec::new(),
        platform_amount: 0,
        unattributed_amount: 0,
        audit: Vec::new(),
    };
    for pool in pools {
        let mut breakdown = PoolBreakdown {
            pool_id: pool.pool_id.clone(),
            amount_cents: pool.amount_cents,
            platform_cents: 0,
            rightsholder_cents: 0,
            unattributed_cents: 0,
        };
        let mut payees: BTreeMap<String, u64> = BTreeMap::new();
        let step = |stage, track_id: Option<&String>, a: Apportionment| RoundingStep {
            pool_id: pool.pool_id.clone(),
            stage,
            track_id: track_id.cloned(),
            apportionment: a,
        };

        let alloc = pro_rata_allocation(pool.amount_cents, stream_counts);
        breakdown.unattributed_cents += alloc.unallocated;
        if let Some(a) = alloc.step {
            statement.audit.push(step(Stage::Pool, None, a));
        }
        for (track, &cents) in &alloc.per_track {
            if cents == 0 {
                continue;
            }
            let split = largest_remainder(cents, &platform_split).expect("platform split weights sum to the scale");
            let (platform, rights) = (split.shares[0].amount, split.shares[1].amount);
            statement.audit.push(step(Stage::Platform, Some(track), split));
            breakdown.platform_cents += platform;
            if rights == 0 {
                continue;
            }
            let shares: Vec<(String, u128)> = match weights.get(track) {
                Some(TrackWeights::Weighted(ws)) => ws.iter().map(|(id, w)| (id.clone(), scaled(*w))).collect(),
                _ => Vec::new(),
            };
            match largest_remainder(rights, &shares) {
                Some(a) => {
                    for s in &a.shares {
                        *payees.entry(s.id.clone()).or_insert(0) += s.amount;
                    }
                    breakdown.rightsholder_cents += rights;
                    statement.audit.push(step(Stage::Rightsholders, Some(track), a));
                }
                None => breakdown.unattributed_cents += rights,
            }
        }
        for (id, amount) in payees.into_iter().filter(|p| p.1 > 0) {
            statement.lines.push(StatementLine {
                pool_id: pool.pool_id.clone(),
                rightsholder_id: id,
                amount_cents: amount,
            });
        }
        statement.platform_amount += breakdown.platform_cents;
        statement.unattributed_amount += breakdown.unattributed_cents;
        statement.pools.push(breakdown);
    }
    debug_assert!(statement.is_conserved());
    Ok(statement)
}

/// Settles each period separately, counting only that period's plays.
pub fn settle_periods(
    pools: &[RevenuePool],
    usage: &[UsageEvent],
    weights: &AttributionWeights,
    config: &RoyaltyConfig,
) -> Result<Vec<RoyaltyStatement>, RoyaltyError> {
    let periods: BTreeSet<&String> = pools.iter().map(|p| &p.period).collect();
    periods
        .into_iter()
        .map(|period| {
            let in_period: Vec<RevenuePool> = pools.iter().filter(|p| &p.period == period).cloned().collect();
            let plays: Vec<UsageEvent> = usage.iter().filter(|e| &e.period() == period).cloned().collect();
            let counts = count_eligible_streams(&plays, config.min_seconds);
            settle(&in_period, &counts, weights, config.platform_cut)
        })
        .collect()
}
