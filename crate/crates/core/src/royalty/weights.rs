use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// How raw attribution scores become payout weights. Negative scores are
/// always clipped to zero.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightPolicy {
    /// Keep only the `k` highest scores (ties to the lower index).
    pub top_k: Option<usize>,
    /// Drop normalized weights below this floor, then renormalize.
    pub min_share: Option<f64>,
}

/// Payout weights of one generated track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackWeights {
    /// `(payee id, weight)`, weights summing to 1.
    Weighted(Vec<(String, f64)>),
    Unattributed,
}

/// Weights per generated track.
pub type AttributionWeights = BTreeMap<String, TrackWeights>;

impl TrackWeights {
    /// Sums weights of payees that map to the same rightsholder; ids missing
    /// from `owner` keep their own id.
    pub fn by_rightsholder(&self, owner: &BTreeMap<String, String>) -> TrackWeights {
        match self {
            TrackWeights::Unattributed => TrackWeights::Unattributed,
            TrackWeights::Weighted(ws) => {
                let mut agg: BTreeMap<String, f64> = BTreeMap::new();
                for (id, w) in ws {
                    *agg.entry(owner.get(id).unwrap_or(id).clone()).or_insert(0.0) += w;
                }
                TrackWeights::Weighted(agg.into_iter().collect())
            }
        }
    }
}

fn normalize(ids: &[String], raw: &[f64]) -> TrackWeights {
    let total: f64 = raw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return TrackWeights::Unattributed;
    }
    TrackWeights::Weighted(ids.iter().cloned().zip(raw.iter().map(|r| r / total)).collect())
}

/// Clips, optionally truncates to the top `k`, and normalizes one track's
/// scores over `ids`. All-zero (or non-finite) scores leave the track unattributed.
pub fn attribution_weights(scores: &[f64], ids: &[String], policy: &WeightPolicy) -> TrackWeights {
    assert_eq!(scores.len(), ids.len(), "one score per id");
    if scores.iter().any(|s| !s.is_finite()) {
        return TrackWeights::Unattributed;
    }
    let mut raw: Vec<f64> = scores.iter().map(|&s| s.max(0.0)).collect();
    if let Some(k) = policy.top_k {
        let mut order: Vec<usize> = (0..raw.len()).collect();
        order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
        for &i in order.iter().skip(k) {
            raw[i] = 0.0;
        }
    }
    let weights = normalize(ids, &raw);
    match (policy.min_share, &weights) {
        (Some(floor), TrackWeights::Weighted(ws)) => {
            let kept: Vec<f64> = ws.iter().map(|&(_, w)| if w >= floor { w } else { 0.0 }).collect();
            normalize(ids, &kept)
        }
        _ => weights,
    }
}
