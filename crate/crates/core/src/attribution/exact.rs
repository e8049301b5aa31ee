//! The retraining oracle: influence of removing works, by retraining.

use super::{AttributionError, AttributionTarget};
use crate::model::{sequence_log_likelihood, ModelCheckpoint, Trainer, TrainingExample};

/// Utility of a target under a model: log-likelihood of its tokens after its prompt.
pub fn target_utility(model: &ModelCheckpoint, target: &AttributionTarget) -> f64 {
    sequence_log_likelihood(model, &target.tokens, &target.prompt)
}

/// Subset mask that keeps every work except those in `removal`.
pub fn removal_mask(corpus: &[TrainingExample], removal: &[String]) -> Result<Vec<bool>, AttributionError> {
    let mut mask = vec![true; corpus.len()];
    for id in removal {
        let i = corpus
            .iter()
            .position(|ex| &ex.work_id == id)
            .ok_or_else(|| AttributionError::UnknownWork(id.clone()))?;
        mask[i] = false;
    }
    if !mask.iter().any(|&m| m) {
        return Err(AttributionError::EmptyCorpusAfterRemoval);
    }
    Ok(mask)
}

/// `f(target, h_{S \ removal}) - f(target, h_S)`, retraining both models from
/// the trainer's seed.
pub fn exact_influence(
    corpus: &[TrainingExample],
    removal: &[String],
    target: &AttributionTarget,
    trainer: &Trainer,
) -> Result<f64, AttributionError> {
    let base = trainer.fit(corpus, None)?;
    Ok(exact_influences_from_base(&base, corpus, removal, std::slice::from_ref(target), trainer)?[0])
}

/// Influence of one removal set on several targets, reusing an already
/// trained full-corpus model.
pub fn exact_influences_from_base(
    base: &ModelCheckpoint,
    corpus: &[TrainingExample],
    removal: &[String],
    targets: &[AttributionTarget],
    trainer: &Trainer,
) -> Result<Vec<f64>, AttributionError> {
    let mask = removal_mask(corpus, removal)?;
    let reduced = trainer.fit(corpus, Some(&mask))?;
    Ok(targets
        .iter()
        .map(|t| target_utility(&reduced, t) - target_utility(base, t))
        .collect())
}
