use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{next_event_distribution, ModelCheckpoint, ModelError};
use crate::midi::EventSequence;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sampling {
    /// 0 means greedy decoding.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling {
            temperature: 1.0,
            top_k: None,
            seed: 0,
        }
    }
}

/// Samples `length` new events after `prompt`.
///
/// Greedy ties go to the lowest token index.
pub fn generate(
    model: &ModelCheckpoint,
    prompt: &EventSequence,
    length: usize,
    sampling: Sampling,
) -> Result<EventSequence, ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::EmptyPrompt);
    }
    let mut rng = seed::rng_for(sampling.seed, "sample");
    let mut context = prompt.clone();
    let mut out = EventSequence::empty();
    for _ in 0..length {
        let probs = next_event_distribution(model, &context)?;
        let token = if sampling.temperature <= 0.0 {
            argmax(&probs)
        } else {
            sample(&probs, sampling.temperature, sampling.top_k, &mut rng)
        };
        context.push(token as u16);
        out.push(token as u16);
    }
    Ok(out)
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn sample(probs: &[f64], temperature: f64, top_k: Option<usize>, rng: &mut impl Rng) -> usize {
    // Tempered weights p^(1/T), renormalized below.
    let mut w: Vec<(usize, f64)> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| (i, (p.ln() / temperature).exp()))
        .collect();
    if let Some(k) = top_k.filter(|&k| k > 0 && k < w.len()) {
        w.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        w.truncate(k);
        w.sort_by_key(|e| e.0);
    }
    let total: f64 = w.iter().map(|e| e.1).sum();
    let mut u = rng.random::<f64>() * total;
    for &(i, x) in &w {
        if u < x {
            return i;
        }
        u -= x;
    }
    w.last().expect("non-empty vocabulary").0
}
