use std::collections::BTreeMap;
use std::io::BufRead;

use chrono::{DateTime, FixedOffset};
use serde::{Deserialize, Serialize};

use super::RoyaltyError;

/// One play of a generated track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub track_id: String,
    /// RFC 3339.
    pub timestamp: DateTime<FixedOffset>,
    pub seconds_played: f64,
}

impl UsageEvent {
    /// Calendar month (`YYYY-MM`, UTC) the play belongs to.
    pub fn period(&self) -> String {
        self.timestamp.naive_utc().format("%Y-%m").to_string()
    }
}

/// Reads a JSON-lines usage log; blank lines are skipped.
pub fn read_usage_log<R: BufRead>(reader: R) -> Result<Vec<UsageEvent>, RoyaltyError> {
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let invalid = |reason: String| RoyaltyError::InvalidUsage { line: i + 1, reason };
        let event: UsageEvent = serde_json::from_str(&line).map_err(|e| invalid(e.to_string()))?;
        if !(event.seconds_played.is_finite() && event.seconds_played >= 0.0) {
            return Err(invalid(format!("seconds_played {} must be finite and >= 0", event.seconds_played)));
        }
        events.push(event);
    }
    Ok(events)
}

/// Plays of at least `min_seconds`, counted per track.
pub fn count_eligible_streams(events: &[UsageEvent], min_seconds: f64) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for e in events.iter().filter(|e| e.seconds_played >= min_seconds) {
        *counts.entry(e.track_id.clone()).or_insert(0) += 1;
    }
    counts
}
