//! Rank correlation between estimated and retrained subset influence.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::correlation::spearman_rank_correlation;
use super::EvalError;
use crate::attribution::{target_utility, AttributionMatrix, AttributionTarget, Level};
use crate::exec::Exec;
use crate::model::{ModelCheckpoint, Trainer, TrainingExample};
use crate::seed;

/// Random removal sets, each holding `round(fraction * n)` distinct works.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetPlan {
    /// Sorted work indices per subset.
    pub subsets: Vec<Vec<usize>>,
    pub fraction: f64,
    pub seed: u64,
    pub n_works: usize,
}

impl SubsetPlan {
    pub fn random(n_works: usize, count: usize, fraction: f64, seed: u64) -> Result<Self, EvalError> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(EvalError::InvalidPlan(format!("fraction {fraction} outside (0, 1)")));
        }
        let size = (fraction * n_works as f64).round() as usize;
        if size == 0 || size >= n_works {
            return Err(EvalError::InvalidPlan(format!(
                "fraction {fraction} of {n_works} works gives subsets of size {size}"
            )));
        }
        let mut rng = seed::rng_for(seed, "subsets");
        let subsets = (0..count)
            .map(|_| {
                let mut s = sample(&mut rng, n_works, size).into_vec();
                s.sort_unstable();
                s
            })
            .collect();
        Ok(SubsetPlan {
            subsets,
            fraction,
            seed,
            n_works,
        })
    }

    pub fn subset_size(&self) -> usize {
        self.subsets.first().map_or(0, Vec::len)
    }

    /// Training mask of the corpus with subset `s` removed.
    pub fn keep_mask(&self, s: usize) -> Vec<bool> {
        let mut mask = vec![true; self.n_works];
        for &i in &self.subsets[s] {
            mask[i] = false;
        }
        mask
    }
}

/// The full-corpus model and one retrained model per removal subset, shared
/// by every target.
#[derive(Debug, Clone)]
pub struct RetrainCache {
    pub base: ModelCheckpoint,
    pub models: Vec<ModelCheckpoint>,
}

impl RetrainCache {
    pub fn build(
        corpus: &[TrainingExample],
        plan: &SubsetPlan,
        trainer: &Trainer,
        exec: Exec,
    ) -> Result<Self, EvalError> {
        if plan.n_works != corpus.len() {
            return Err(EvalError::DimensionMismatch {
                what: "subset plan works",
                expected: corpus.len(),
                found: plan.n_works,
            });
        }
        let base = trainer.fit(corpus, None)?;
        let models = exec.try_map_range(plan.subsets.len(), |s| trainer.fit(corpus, Some(&plan.keep_mask(s))))?;
        Ok(RetrainCache { base, models })
    }

    /// Retraining influence `I(S', target)` as `[target][subset]`.
    pub fn influences(&self, targets: &[AttributionTarget], exec: Exec) -> Vec<Vec<f64>> {
        exec.map(targets, |t| {
            let base = target_utility(&self.base, t);
            self.models.iter().map(|m| target_utility(m, t) - base).collect()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetRho {
    pub target_id: String,
    /// `None` when either side is constant over the subsets.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdsReport {
    pub level: Level,
    pub per_target: Vec<TargetRho>,
    /// Mean over targets with a defined correlation.
    pub mean_rho: Option<f64>,
    pub defined_targets: usize,
    pub subsets: usize,
    pub fraction: f64,
    pub subset_size: usize,
}

/// Correlates estimated subset scores `sum_{m in S'} score(m)` with the
/// negated retraining influence `-I(S')` for every target.
///
/// `influences` is `[target][subset]`, as produced by [`RetrainCache::influences`].
pub fn lds_from_influences(
    estimated: &AttributionMatrix,
    plan: &SubsetPlan,
    influences: &[Vec<f64>],
) -> Result<LdsReport, EvalError> {
    if influences.len() != estimated.n_targets() {
        return Err(EvalError::DimensionMismatch {
            what: "targets",
            expected: estimated.n_targets(),
            found: influences.len(),
        });
    }
    if estimated.n_works() != plan.n_works {
        return Err(EvalError::DimensionMismatch {
            what: "works",
            expected: plan.n_works,
            found: estimated.n_works(),
        });
    }
    let mut per_target = Vec::with_capacity(influences.len());
    for (t, truth) in influences.iter().enumerate() {
        if truth.len() != plan.subsets.len() {
            return Err(EvalError::DimensionMismatch {
                what: "subsets",
                expected: plan.subsets.len(),
                found: truth.len(),
            });
        }
        let row = estimated.row(t);
        let predicted: Vec<f64> = plan.subsets.iter().map(|s| s.iter().map(|&i| row[i]).sum()).collect();
        let negated: Vec<f64> = truth.iter().map(|v| -v).collect();
        per_target.push(TargetRho {
            target_id: estimated.target_ids[t].clone(),
            rho: spearman_rank_correlation(&predicted, &negated)?,
        });
    }
    let defined: Vec<f64> = per_target.iter().filter_map(|r| r.rho).collect();
    Ok(LdsReport {
        level: estimated.level,
        mean_rho: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        defined_targets: defined.len(),
        per_target,
        subsets: plan.subsets.len(),
        fraction: plan.fraction,
        subset_size: plan.subset_size(),
    })
}

/// Retrains once per subset and evaluates the estimated scores of `targets`.
pub fn lds_evaluate(
    estimated: &AttributionMatrix,
    corpus: &[TrainingExample],
    plan: &SubsetPlan,
    trainer: &Trainer,
    targets: &[AttributionTarget],
    exec: Exec,
) -> Result<LdsReport, EvalError> {
    let cache = RetrainCache::build(corpus, plan, trainer, exec)?;
    lds_from_influences(estimated, plan, &cache.influences(targets, exec))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_sizes_and_determinism() {
        let p = SubsetPlan::random(64, 40, 0.5, 7).unwrap();
        assert_eq!(p.subsets.len(), 40);
        for s in &p.subsets {
            assert_eq!(s.len(), 32);
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(p, SubsetPlan::random(64, 40, 0.5, 7).unwrap());
        assert_eq!(SubsetPlan::random(10, 1, 0.25, 0).unwrap().subset_size(), 3);
        assert!(SubsetPlan::random(10, 1, 1.0, 0).is_err());
        assert!(SubsetPlan::random(2, 1, 0.1, 0).is_err());
        assert_eq!(p.keep_mask(0).iter().filter(|&&m| !m).count(), 32);
    }

    #[test]
    fn additive_truth_gives_perfect_rank() {
        let n = 12;
        let plan = SubsetPlan::random(n, 15, 0.5, 3).unwrap();
        let singles: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 * 0.1 - 0.6).collect();
        // Scores equal minus the singleton influence; truth adds exactly.
        let scores: Vec<f64> = singles.iter().map(|v| -v).collect();
        let matrix = AttributionMatrix::from_rows(
            Level::Event,
            vec!["t".into()],
            (0..n).map(|i| format!("w{i}")).collect(),
            &[scores],
            serde_json::Value::Null,
        )
        .unwrap();
        let truth: Vec<f64> = plan.subsets.iter().map(|s| s.iter().map(|&i| singles[i]).sum()).collect();
        let r = lds_from_influences(&matrix, &plan, &[truth]).unwrap();
        assert!((r.mean_rho.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.fraction, 0.5);
    }
}
