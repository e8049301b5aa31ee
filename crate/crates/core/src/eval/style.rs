//! Loudness, key and duration features, and their similarity between targets
//! and training works as a function of attribution rank.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::correlation::pearson_correlation;
use super::EvalError;
use crate::attribution::AttributionMatrix;
use crate::midi::{bin_velocity, Event, EventSequence, VocabularyLayout, DEFAULT_VELOCITY_BIN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleFeatures {
    /// Mean reconstructed NOTE_ON velocity; `None` without NOTE_ON events.
    pub loudness: Option<f64>,
    /// Mean NOTE_ON pitch; `None` without NOTE_ON events.
    pub key: Option<f64>,
    /// Sum of time shifts in seconds.
    pub duration: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Loudness,
    Key,
    Duration,
}

impl Feature {
    pub const ALL: [Feature; 3] = [Feature::Loudness, Feature::Key, Feature::Duration];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Loudness => "loudness",
            Feature::Key => "key",
            Feature::Duration => "duration",
        }
    }
}

impl StyleFeatures {
    pub fn get(&self, feature: Feature) -> Option<f64> {
        match feature {
            Feature::Loudness => self.loudness,
            Feature::Key => self.key,
            Feature::Duration => Some(self.duration),
        }
    }
}

pub fn style_features(events: &EventSequence) -> StyleFeatures {
    let layout = VocabularyLayout::default();
    let mut bin = DEFAULT_VELOCITY_BIN;
    let (mut velocity_sum, mut pitch_sum, mut ons) = (0.0, 0.0, 0usize);
    let mut ms = 0u64;
    for &t in events.tokens() {
        match layout.decode(t) {
            Some(Event::Velocity(b)) => bin = b,
            Some(Event::NoteOn(p)) => {
                velocity_sum += f64::from(bin_velocity(bin));
                pitch_sum += f64::from(p);
                ons += 1;
            }
            Some(Event::TimeShift(s)) => ms += u64::from(s),
            _ => {}
        }
    }
    let mean = |s: f64| (ons > 0).then(|| s / ons as f64);
    StyleFeatures {
        loudness: mean(velocity_sum),
        key: mean(pitch_sum),
        duration: ms as f64 / 1000.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStat {
    pub bucket: usize,
    /// Half-open rank range, 0 = highest score.
    pub rank_start: usize,
    pub rank_end: usize,
    pub feature: Feature,
    /// Pearson correlation of (target feature, work feature) pooled over all
    /// targets and ranks of the bucket.
    pub pearson: Option<f64>,
    pub pairs: usize,
    /// Min, lower quartile, median, upper quartile and max of the per-rank
    /// correlations across targets within the bucket.
    pub rank_quartiles: Option<[f64; 5]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleReport {
    pub buckets: usize,
    pub targets: usize,
    pub works: usize,
    pub stats: Vec<BucketStat>,
}

impl StyleReport {
    pub fn get(&self, bucket: usize, feature: Feature) -> Option<&BucketStat> {
        self.stats.iter().find(|s| s.bucket == bucket && s.feature == feature)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "bucket", "rank_start", "rank_end", "feature", "pearson", "pairs", "min", "q1", "median", "q3", "max",
        ])?;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for s in &self.stats {
            let q = s.rank_quartiles.map_or([None; 5], |q| q.map(Some));
            let mut rec = vec![
                s.bucket.to_string(),
                s.rank_start.to_string(),
                s.rank_end.to_string(),
                s.feature.name().to_string(),
                opt(s.pearson),
                s.pairs.to_string(),
            ];
            rec.extend(q.iter().map(|&v| opt(v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn correlate(pairs: &[(Option<f64>, Option<f64>)]) -> (Option<f64>, usize) {
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.iter().filter_map(|&(a, b)| Some((a?, b?))).unzip();
    let r = if xs.len() >= 2 {
        pearson_correlation(&xs, &ys).ok().flatten()
    } else {
        None
    };
    (r, xs.len())
}

/// Ranks works per target by descending score (ties by work order) and
/// correlates target and work features within each of `buckets` equal rank
/// ranges.
pub fn style_similarity_by_rank(
    scores: &AttributionMatrix,
    work_features: &[StyleFeatures],
    target_features: &[StyleFeatures],
    buckets: usize,
) -> Result<StyleReport, EvalError> {
    let n = scores.n_works();
    if work_features.len() != n {
        return Err(EvalError::DimensionMismatch {
            what: "work features",
            expected: n,
            found: work_features.len(),
        });
    }
    if target_features.len() != scores.n_targets() {
        return Err(EvalError::DimensionMismatch {
            what: "target features",
            expected: scores.n_targets(),
            found: target_features.len(),
        });
    }
    if buckets == 0 || buckets > n {
        return Err(EvalError::InvalidPlan(format!("{buckets} buckets over {n} works")));
    }
    let rankings: Vec<Vec<usize>> = scores
        .rows()
        .map(|row| {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order
        })
        .collect();

    let mut stats = Vec::with_capacity(buckets * 3);
    for b in 0..buckets {
        let (start, end) = (b * n / buckets, (b + 1) * n / buckets);
        for feature in Feature::ALL {
            let pair = |t: usize, r: usize| (target_features[t].get(feature), work_features[rankings[t][r]].get(feature));
            let pooled: Vec<_> = (0..rankings.len())
                .flat_map(|t| (start..end).map(move |r| (t, r)))
                .map(|(t, r)| pair(t, r))
                .collect();
            let (pearson, pairs) = correlate(&pooled);
            let mut per_rank: Vec<f64> = (start..end)
                .filter_map(|r| {
                    let column: Vec<_> = (0..rankings.len()).map(|t| pair(t, r)).collect();
                    correlate(&column).0
                })
                .collect();
            per_rank.sort_by(f64::total_cmp);
            let rank_quartiles = (!per_rank.is_empty()).then(|| [0.0, 0.25, 0.5, 0.75, 1.0].map(|p| quantile(&per_rank, p)));
            stats.push(BucketStat {
                bucket: b,
                rank_start: start,
                rank_end: end,
                feature,
                pearson,
                pairs,
                rank_quartiles,
            });
        }
    }
    Ok(StyleReport {
        buckets,
        targets: scores.n_targets(),
        works: n,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::Level;
    use crate::midi::velocity_bin;

    fn seq(v: &[u16]) -> EventSequence {
        EventSequence::new(v.to_vec()).unwrap()
    }

    #[test]
    fn feature_examples() {
        // Bins 9 and 20 reconstruct to 38 and 82.
        let f = style_features(&seq(&[365, 60, 376, 64]));
        assert_eq!(f.loudness, Some(60.0));
        assert_eq!(velocity_bin(38), 9);
        let f = style_features(&seq(&[60, 64, 67]));
        assert!((f.key.unwrap() - 191.0 / 3.0).abs() < 1e-12);
        assert_eq!(f.loudness, Some(66.0));
        // 500 ms and 250 ms shifts.
        let f = style_features(&seq(&[305, 280]));
        assert!((f.duration - 0.75).abs() < 1e-12);
        assert_eq!(f.key, None);
        assert_eq!(f.loudness, None);
    }

    #[test]
    fn identical_works_leave_every_bucket_undefined() {
        let same = StyleFeatures {
            loudness: Some(64.0),
            key: Some(60.0),
            duration: 2.0,
        };
        let m = AttributionMatrix::from_rows(
            Level::Segment,
            vec!["a".into(), "b".into(), "c".into()],
            (0..10).map(|i| format!("w{i}")).collect(),
            &[(0..10).map(f64::from).collect(), vec![1.0; 10], (0..10).map(|i| -f64::from(i)).collect()],
            serde_json::Value::Null,
        )
        .unwrap();
        let targets = [
            StyleFeatures { loudness: Some(30.0), key: Some(50.0), duration: 1.0 },
            StyleFeatures { loudness: Some(90.0), key: Some(70.0), duration: 3.0 },
            StyleFeatures { loudness: Some(60.0), key: Some(40.0), duration: 5.0 },
        ];
        let r = style_similarity_by_rank(&m, &[same; 10], &targets, 5).unwrap();
        assert_eq!(r.stats.len(), 15);
        assert!(r.stats.iter().all(|s| s.pearson.is_none() && s.rank_quartiles.is_none()));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 16);
    }

    #[test]
    fn aligned_top_ranks_correlate() {
        // Each target ranks first the work whose features match it.
        let works: Vec<StyleFeatures> = (0..6)
            .map(|i| StyleFeatures { loudness: Some(20.0 * f64::from(i) + 10.0), key: Some(40.0 + f64::from(i)), duration: f64::from(i) })
            .collect();
        let rows: Vec<Vec<f64>> = (0..6).map(|t| (0..6).map(|w| if w == t { 1.0 } else { -((w * 5 + t) % 6) as f64 }).collect()).collect();
        let m = AttributionMatrix::from_rows(
            Level::Event,
            (0..6).map(|i| format!("t{i}")).collect(),
            (0..6).map(|i| format!("w{i}")).collect(),
            &rows,
            serde_json::Value::Null,
        )
        .unwrap();
        let r = style_similarity_by_rank(&m, &works, &works, 6).unwrap();
        for f in Feature::ALL {
            assert!((r.get(0, f).unwrap().pearson.unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn quantiles_interpolate() {
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.25), 2.0);
        assert_eq!(quantile(&[1.0, 2.0], 0.5), 1.5);
    }
}
