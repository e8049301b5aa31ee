//! Gradient-projection estimator.
//!
//! Each ensemble member featurizes every training work by the projected
//! gradient `phi_i` of the output function summed over the work's events, and
//! keeps `(Phi^T Phi + lambda I)^-1`. A target event with projected gradient
//! `phi_t` scores work `i` as `q_i * phi_i^T (Phi^T Phi + lambda I)^-1 phi_t`,
//! averaged over members.

use log::debug;
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::matrix::{AttributionMatrix, SignConvention};
use super::projection::SignProjection;
use super::{AttributionError, AttributionTarget, Level};
use crate::exec::Exec;
use crate::midi::EventSequence;
use crate::model::{event_output_gradient, GradientTarget, ModelCheckpoint, OutputFn, TrainingExample};
use crate::seed;

/// Gradients held in memory at once while featurizing.
const GRADIENT_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    pub projection_dim: usize,
    /// Ridge added to the kernel; `None` uses `1e-6 * trace(Phi^T Phi) / d`.
    pub lambda: Option<f64>,
    pub output_fn: OutputFn,
    /// Build each member's kernel from its own training works only. Scores are
    /// still produced for every work.
    pub features_on_member_subset: bool,
    /// Projection seeds derive from this.
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            projection_dim: 512,
            lambda: None,
            output_fn: OutputFn::default(),
            features_on_member_subset: false,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IndexMember {
    pub checkpoint: ModelCheckpoint,
    pub params_hash: String,
    pub subset_mask: Option<Vec<bool>>,
    pub projection: SignProjection,
    /// `n x d` projected work gradients.
    pub features: DMatrix<f64>,
    /// Mean `1 - p_correct` over each work's events.
    pub weights: Vec<f64>,
    pub lambda: f64,
    /// `d x d`
    pub kernel_inverse: DMatrix<f64>,
    /// `diag(weights) * features * kernel_inverse`
    score_map: DMatrix<f64>,
}

impl IndexMember {
    /// Scores every work against an already projected target feature.
    pub fn score_projected(&self, phi: &[f64]) -> Result<Vec<f64>, AttributionError> {
        if phi.len() != self.projection.dim {
            return Err(AttributionError::DimensionMismatch {
                expected: self.projection.dim,
                found: phi.len(),
            });
        }
        Ok((&self.score_map * DVector::from_column_slice(phi)).iter().copied().collect())
    }
}

#[derive(Debug, Clone)]
pub struct AttributionIndex {
    pub members: Vec<IndexMember>,
    pub projection_dim: usize,
    pub output_fn: OutputFn,
    pub work_ids: Vec<String>,
    pub config: IndexConfig,
}

impl AttributionIndex {
    pub fn n_works(&self) -> usize {
        self.work_ids.len()
    }
}

/// Per-work gradient features for one member: `(Phi, q)`.
fn featurize(
    model: &ModelCheckpoint,
    projection: &SignProjection,
    corpus: &[TrainingExample],
    config: &IndexConfig,
) -> Result<(DMatrix<f64>, Vec<f64>), AttributionError> {
    let empty = EventSequence::empty();
    let mut features = DMatrix::<f64>::zeros(corpus.len(), projection.dim);
    let mut weights = Vec::with_capacity(corpus.len());
    for (chunk_idx, chunk) in corpus.chunks(GRADIENT_BATCH).enumerate() {
        let grads = config.exec.map(chunk, |ex| {
            let target = GradientTarget {
                context: &empty,
                events: &ex.tokens,
            };
            event_output_gradient(model, target, config.output_fn)
        });
        let refs: Vec<&[f64]> = grads.iter().map(|g| g.grad.as_slice()).collect();
        let phi = projection.project(&refs)?;
        let row0 = chunk_idx * GRADIENT_BATCH;
        features.rows_mut(row0, chunk.len()).copy_from(&phi);
        for g in &grads {
            let n = g.p_correct.len().max(1) as f64;
            weights.push(g.p_correct.iter().map(|p| 1.0 - p).sum::<f64>() / n);
        }
    }
    Ok((features, weights))
}

fn condition_estimate(kernel: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(kernel.clone()).eigenvalues;
    let max = eig.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |m, &v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Fits the estimator on `ensemble`; each member keeps its own projection.
pub fn fit_attribution_index(
    corpus: &[TrainingExample],
    ensemble: &[ModelCheckpoint],
    config: &IndexConfig,
) -> Result<AttributionIndex, AttributionError> {
    if ensemble.is_empty() {
        return Err(AttributionError::EmptyEnsemble);
    }
    if corpus.is_empty() {
        return Err(AttributionError::InvalidConfig("empty corpus".into()));
    }
    if config.projection_dim == 0 {
        return Err(AttributionError::InvalidConfig("projection_dim must be positive".into()));
    }
    if let Some(l) = config.lambda {
        if !(l >= 0.0 && l.is_finite()) {
            return Err(AttributionError::InvalidConfig(format!("lambda must be finite and >= 0, got {l}")));
        }
    }
    let d = config.projection_dim;
    let mut members = Vec::with_capacity(ensemble.len());
    for (k, model) in ensemble.iter().enumerate() {
        let projection = SignProjection::new(
            seed::derive_seed(config.seed, &format!("projection/{k}")),
            model.param_count(),
            d,
        );
        let (features, weights) = featurize(model, &projection, corpus, config)?;

        let mask = model.provenance.subset_mask.clone();
        let kernel_rows: Vec<usize> = match (&mask, config.features_on_member_subset) {
            (Some(m), true) if m.len() == corpus.len() => (0..corpus.len()).filter(|&i| m[i]).collect(),
            _ => (0..corpus.len()).collect(),
        };
        let phi = features.select_rows(&kernel_rows);
        let mut kernel = phi.transpose() * &phi;
        let lambda = config.lambda.unwrap_or(1e-6 * kernel.trace() / d as f64);
        for i in 0..d {
            kernel[(i, i)] += lambda;
        }
        let chol = Cholesky::new(kernel.clone()).ok_or_else(|| AttributionError::SingularKernel {
            member: k,
            condition: condition_estimate(&kernel),
        })?;
        let kernel_inverse = chol.inverse();
        let mut score_map = &features * &kernel_inverse;
        for (i, &q) in weights.iter().enumerate() {
            score_map.row_mut(i).scale_mut(q);
        }
        debug!("member {k}: lambda {lambda:.3e}");
        members.push(IndexMember {
            checkpoint: model.clone(),
            params_hash: model.params_hash(),
            subset_mask: mask,
            projection,
            features,
            weights,
            lambda,
            kernel_inverse,
            score_map,
        });
    }
    Ok(AttributionIndex {
        members,
        projection_dim: d,
        output_fn: config.output_fn,
        work_ids: corpus.iter().map(|e| e.work_id.clone()).collect(),
        config: config.clone(),
    })
}

/// Ensemble-mean scores of single-event targets, one vector per target.
fn score_event_list(
    index: &AttributionIndex,
    events: &[AttributionTarget],
) -> Result<Vec<Vec<f64>>, AttributionError> {
    let n = index.n_works();
    let mut total = vec![vec![0.0; n]; events.len()];
    for member in &index.members {
        for (chunk_idx, chunk) in events.chunks(GRADIENT_BATCH).enumerate() {
            let grads = index.config.exec.map(chunk, |t| {
                let target = GradientTarget {
                    context: &t.prompt,
                    events: &t.tokens,
                };
                event_output_gradient(&member.checkpoint, target, index.output_fn).grad
            });
            let refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let phi = member.projection.project(&refs)?;
            let scores = &member.score_map * phi.transpose();
            for j in 0..chunk.len() {
                let row = &mut total[chunk_idx * GRADIENT_BATCH + j];
                for (i, r) in row.iter_mut().enumerate() {
                    *r += scores[(i, j)];
                }
            }
        }
    }
    let k = index.members.len() as f64;
    for row in &mut total {
        for r in row.iter_mut() {
            *r /= k;
        }
    }
    Ok(total)
}

fn require(target: &AttributionTarget, kind: Level) -> Result<(), AttributionError> {
    target.validate()?;
    if target.kind != kind {
        return Err(AttributionError::InvalidTarget {
            id: target.target_id.clone(),
            reason: format!("expected a {kind:?} target"),
        });
    }
    Ok(())
}

/// Scores of every training work for one generated event.
pub fn score_events(index: &AttributionIndex, target: &AttributionTarget) -> Result<Vec<f64>, AttributionError> {
    require(target, Level::Event)?;
    Ok(score_event_list(index, std::slice::from_ref(target))?.remove(0))
}

/// Event scores for each event of a segment, with its running context.
pub fn segment_event_scores(
    index: &AttributionIndex,
    target: &AttributionTarget,
) -> Result<Vec<Vec<f64>>, AttributionError> {
    require(target, Level::Segment)?;
    let events = (0..target.tokens.len())
        .map(|i| target.event_at(i))
        .collect::<Result<Vec<_>, _>>()?;
    score_event_list(index, &events)
}

fn sum_rows(rows: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for row in rows {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

/// Segment scores: the sum of the segment's event scores.
pub fn score_segment(index: &AttributionIndex, target: &AttributionTarget) -> Result<Vec<f64>, AttributionError> {
    Ok(sum_rows(&segment_event_scores(index, target)?, index.n_works()))
}

/// Scores a batch of targets of one kind into a matrix.
pub fn score_targets(
    index: &AttributionIndex,
    targets: &[AttributionTarget],
) -> Result<AttributionMatrix, AttributionError> {
    let level = targets.first().map_or(Level::Event, |t| t.kind);
    let mut events = Vec::new();
    let mut spans = Vec::with_capacity(targets.len());
    for t in targets {
        require(t, level)?;
        let start = events.len();
        match level {
            Level::Event => events.push(t.clone()),
            Level::Segment => {
                for i in 0..t.tokens.len() {
                    events.push(t.event_at(i)?);
                }
            }
        }
        spans.push(start..events.len());
    }
    let per_event = score_event_list(index, &events)?;
    let n = index.n_works();
    let mut scores = Vec::with_capacity(targets.len() * n);
    for span in spans {
        scores.extend(sum_rows(&per_event[span], n));
    }
    AttributionMatrix::new(
        level,
        SignConvention::PositiveMeansHelpful,
        targets.iter().map(|t| t.target_id.clone()).collect(),
        index.work_ids.clone(),
        scores,
        serde_json::to_value(&index.config)?,
    )
}
