//! Training-data attribution for generated music.
//!
//! Two sources of scores live here: the exact retraining oracle
//! ([`exact_influence`]), which defines ground truth as the change in a
//! target's log-likelihood after removing works and retraining, and a
//! gradient-projection estimator ([`fit_attribution_index`] plus
//! [`score_events`] / [`score_segment`]).
//!
//! Stored estimator scores use the "positive means helpful" convention, the
//! opposite sign of the retraining influence; see [`SignConvention`].

mod exact;
mod index;
mod matrix;
mod projection;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::EventSequence;
use crate::model::ModelError;

pub use exact::{exact_influence, exact_influences_from_base, removal_mask, target_utility};
pub use index::{
    fit_attribution_index, score_events, score_segment, score_targets, segment_event_scores,
    AttributionIndex, IndexConfig, IndexMember,
};
pub use matrix::{AttributionMatrix, SignConvention, SCORE_FILE_MAGIC};
pub use projection::SignProjection;

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("removing the requested works leaves an empty training set")]
    EmptyCorpusAfterRemoval,
    #[error("unknown work id {0:?}")]
    UnknownWork(String),
    #[error("invalid attribution target {id:?}: {reason}")]
    InvalidTarget { id: String, reason: String },
    #[error("kernel of ensemble member {member} is not positive definite (condition estimate {condition:.3e}); increase lambda")]
    SingularKernel { member: usize, condition: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("attribution needs at least one ensemble member")]
    EmptyEnsemble,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed score file: {0}")]
    BadScoreFile(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Granularity of an attribution target, and of a score matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Event,
    Segment,
}

/// Generated music to attribute: `tokens` following `prompt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionTarget {
    pub kind: Level,
    pub prompt: EventSequence,
    pub tokens: EventSequence,
    pub target_id: String,
}

impl AttributionTarget {
    /// A single event with its full preceding context.
    pub fn event(target_id: impl Into<String>, prompt: EventSequence, event: u16) -> Result<Self, AttributionError> {
        let target_id = target_id.into();
        let tokens = EventSequence::new(vec![event]).map_err(|e| AttributionError::InvalidTarget {
            id: target_id.clone(),
            reason: e.to_string(),
        })?;
        Ok(AttributionTarget {
            kind: Level::Event,
            prompt,
            tokens,
            target_id,
        })
    }

    pub fn segment(
        target_id: impl Into<String>,
        prompt: EventSequence,
        tokens: EventSequence,
    ) -> Result<Self, AttributionError> {
        let target = AttributionTarget {
            kind: Level::Segment,
            prompt,
            tokens,
            target_id: target_id.into(),
        };
        target.validate()?;
        Ok(target)
    }

    /// The event target at position `i` of this target's tokens, with the
    /// running context `prompt ++ tokens[..i]`.
    pub fn event_at(&self, i: usize) -> Result<AttributionTarget, AttributionError> {
        let Some(&event) = self.tokens.tokens().get(i) else {
            return Err(self.invalid(format!("event index {i} out of range")));
        };
        let context = self.prompt.concat(&self.tokens.slice(0..i));
        AttributionTarget::event(format!("{}/e{i}", self.target_id), context, event)
    }

    pub fn validate(&self) -> Result<(), AttributionError> {
        match (self.kind, self.tokens.len()) {
            (_, 0) => Err(self.invalid("no target events".into())),
            (Level::Event, n) if n != 1 => Err(self.invalid(format!("event target holds {n} events"))),
            _ => Ok(()),
        }
    }

    fn invalid(&self, reason: String) -> AttributionError {
        AttributionError::InvalidTarget {
            id: self.target_id.clone(),
            reason,
        }
    }
}

/// I.i.d. uniform(0, 1) scores, reproducible from `seed`.
pub fn random_baseline_scores(n: usize, seed: u64) -> Vec<f64> {
    use rand::Rng;
    let mut rng = crate::seed::rng(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(v: &[u16]) -> EventSequence {
        EventSequence::new(v.to_vec()).unwrap()
    }

    #[test]
    fn event_targets_hold_one_event() {
        let t = AttributionTarget::event("t", seq(&[1, 2]), 3).unwrap();
        assert_eq!(t.tokens.len(), 1);
        let bad = AttributionTarget {
            kind: Level::Event,
            prompt: seq(&[1]),
            tokens: seq(&[2, 3]),
            target_id: "x".into(),
        };
        assert!(bad.validate().is_err());
        assert!(AttributionTarget::segment("s", seq(&[1]), EventSequence::empty()).is_err());
    }

    #[test]
    fn event_at_extends_context() {
        let s = AttributionTarget::segment("s", seq(&[1, 2]), seq(&[7, 8, 9])).unwrap();
        let e = s.event_at(2).unwrap();
        assert_eq!(e.prompt.tokens(), &[1, 2, 7, 8]);
        assert_eq!(e.tokens.tokens(), &[9]);
        assert!(s.event_at(3).is_err());
    }

    #[test]
    fn random_scores_are_seeded() {
        let a = random_baseline_scores(50, 3);
        assert_eq!(a.len(), 50);
        assert_eq!(a, random_baseline_scores(50, 3));
        assert_ne!(a, random_baseline_scores(50, 4));
        assert!(a.iter().all(|&x| (0.0..1.0).contains(&x)));
    }
}
