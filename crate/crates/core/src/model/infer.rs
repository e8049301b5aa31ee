//! Likelihoods and exact output gradients, evaluated in `f64`.

use serde::{Deserialize, Serialize};

use super::transformer::{backward, forward, log_softmax};
use super::{ModelCheckpoint, ModelError};
use crate::midi::EventSequence;

/// Scalar output whose parameter gradient featurizes an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFn {
    /// `log p(e)`
    LogProb,
    /// `log(p(e) / (1 - p(e)))`
    #[default]
    LogitMargin,
}

/// An event or segment together with the context preceding it.
#[derive(Debug, Clone, Copy)]
pub struct GradientTarget<'a> {
    pub context: &'a EventSequence,
    pub events: &'a EventSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventGradient {
    /// Gradient of the summed output over all events.
    pub grad: Vec<f64>,
    /// Sum of the output function over the events.
    pub value: f64,
    /// Model probability of each target event.
    pub p_correct: Vec<f64>,
}

fn last_n(tokens: &[u16], n: usize) -> &[u16] {
    &tokens[tokens.len().saturating_sub(n)..]
}

/// Forward passes needed to score `events` after `context`: one pass when the
/// whole thing fits the context window, otherwise one truncated pass per event.
/// Calls `visit(fwd, row, target_index)` for every event.
fn for_each_event<F>(model: &ModelCheckpoint, context: &[u16], events: &[u16], mut visit: F)
where
    F: FnMut(&super::transformer::Forward<f64>, usize, usize),
{
    if events.is_empty() {
        return;
    }
    let layout = model.layout();
    let p = model.config.context_length;
    let c = context.len();
    if c + events.len() - 1 <= p {
        let mut input = context.to_vec();
        input.extend_from_slice(&events[..events.len() - 1]);
        let fwd = forward(&model.params, &layout, &input);
        for i in 0..events.len() {
            visit(&fwd, c + i, i);
        }
    } else {
        let mut full = context.to_vec();
        for (i, &e) in events.iter().enumerate() {
            let ctx = last_n(&full, p);
            let fwd = forward(&model.params, &layout, ctx);
            visit(&fwd, ctx.len(), i);
            full.push(e);
        }
    }
}

/// Probability of every vocabulary entry following `context`.
///
/// Only the most recent `context_length` events are visible to the model.
pub fn next_event_distribution(
    model: &ModelCheckpoint,
    context: &EventSequence,
) -> Result<Vec<f64>, ModelError> {
    if context.is_empty() {
        return Err(ModelError::EmptyContext);
    }
    let layout = model.layout();
    let ctx = last_n(context.tokens(), model.config.context_length);
    let fwd = forward(&model.params, &layout, ctx);
    let logits = fwd.logits(&model.params, &layout, ctx.len());
    Ok(log_softmax(&logits).into_iter().map(f64::exp).collect())
}

/// `log p(e_i | running context)` for each event of `segment`.
///
/// An empty `context` is allowed: the first event is conditioned on BOS.
pub fn event_log_probs(
    model: &ModelCheckpoint,
    segment: &EventSequence,
    context: &EventSequence,
) -> Vec<f64> {
    let layout = model.layout();
    let events = segment.tokens();
    let mut out = vec![0.0; events.len()];
    for_each_event(model, context.tokens(), events, |fwd, row, i| {
        let lp = log_softmax(&fwd.logits(&model.params, &layout, row));
        out[i] = lp[usize::from(events[i])];
    });
    out
}

/// Log-likelihood (nats) of `segment` following `context`; the chain-rule sum
/// of [`event_log_probs`].
pub fn sequence_log_likelihood(
    model: &ModelCheckpoint,
    segment: &EventSequence,
    context: &EventSequence,
) -> f64 {
    event_log_probs(model, segment, context).iter().sum()
}

/// Gradient of `psi` with respect to the logits, plus `psi` itself.
fn output_fn_grad(log_probs: &[f64], target: usize, output_fn: OutputFn) -> (Vec<f64>, f64, f64) {
    let probs: Vec<f64> = log_probs.iter().map(|l| l.exp()).collect();
    let p_y = probs[target];
    match output_fn {
        OutputFn::LogProb => {
            let mut g: Vec<f64> = probs.iter().map(|p| -p).collect();
            g[target] += 1.0;
            (g, log_probs[target], p_y)
        }
        OutputFn::LogitMargin => {
            // 1 - p_y summed from the other entries avoids cancellation near p_y = 1.
            let rest: f64 = probs
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != target)
                .map(|(_, p)| p)
                .sum();
            let mut g: Vec<f64> = probs.iter().map(|p| -p / rest).collect();
            g[target] = 1.0;
            (g, log_probs[target] - rest.ln(), p_y)
        }
    }
}

/// Exact gradient of `sum_i psi(e_i)` over the target events, with the output
/// values and per-event probabilities.
pub fn event_output_gradient(
    model: &ModelCheckpoint,
    target: GradientTarget<'_>,
    output_fn: OutputFn,
) -> EventGradient {
    let layout = model.layout();
    let events = target.events.tokens();
    let mut grad = vec![0.0; layout.total];
    let mut value = 0.0;
    let mut p_correct = vec![0.0; events.len()];
    let single_pass = target.context.len() + events.len().saturating_sub(1) <= model.config.context_length;

    let mut pending: Vec<(usize, Vec<f64>)> = Vec::new();
    for_each_event(model, target.context.tokens(), events, |fwd, row, i| {
        let lp = log_softmax(&fwd.logits(&model.params, &layout, row));
        let (g, v, p) = output_fn_grad(&lp, usize::from(events[i]), output_fn);
        value += v;
        p_correct[i] = p;
        if single_pass {
            pending.push((row, g));
            if i + 1 == events.len() {
                backward(&model.params, &layout, fwd, &pending, &mut grad);
            }
        } else {
            backward(&model.params, &layout, fwd, &[(row, g)], &mut grad);
        }
    });
    EventGradient {
        grad,
        value,
        p_correct,
    }
}

/// Gradient of the chosen output function with respect to all parameters.
pub fn per_example_gradient(
    model: &ModelCheckpoint,
    target: GradientTarget<'_>,
    output_fn: OutputFn,
) -> Vec<f64> {
    event_output_gradient(model, target, output_fn).grad
}
