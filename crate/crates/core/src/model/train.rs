//! Deterministic maximum-likelihood training with Adam.
//!
//! Shuffling comes from `config.seed`; per-example gradients of a batch may be
//! computed in parallel but are summed in batch order, so results do not
//! depend on the worker count.

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::checkpoint::{init_model, ModelCheckpoint, Provenance};
use super::layout::Layout;
use super::scalar::Scalar;
use super::transformer::{backward, forward, log_softmax};
use super::{ModelConfig, ModelError, Precision};
use crate::exec::Exec;
use crate::midi::{Corpus, EventSequence};
use crate::seed;

/// Membership of each corpus work in a training subset.
pub type SubsetMask = Vec<bool>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub tokens: EventSequence,
    pub work_id: String,
}

impl TrainingExample {
    pub fn from_corpus(corpus: &Corpus) -> Vec<TrainingExample> {
        corpus
            .works
            .iter()
            .map(|w| TrainingExample {
                tokens: w.tokens.clone(),
                work_id: w.work_id.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Decoupled (AdamW-style) decay.
    pub weight_decay: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 10,
            batch_size: 8,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            exec: Exec::default(),
        }
    }
}

/// Summed token loss and gradient of one window.
fn example_grad<T: Scalar>(params: &[T], layout: &Layout, tokens: &[u16]) -> (f64, Vec<T>) {
    let input = &tokens[..tokens.len() - 1];
    let fwd = forward(params, layout, input);
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(tokens.len());
    for (row, &target) in tokens.iter().enumerate() {
        let lp = log_softmax(&fwd.logits(params, layout, row));
        let t = usize::from(target);
        loss -= lp[t].as_f64();
        let mut g: Vec<T> = lp.iter().map(|&l| l.exp()).collect();
        g[t] -= T::one();
        dlogits.push((row, g));
    }
    let mut grad = vec![T::zero(); layout.total];
    backward(params, layout, &fwd, &dlogits, &mut grad);
    (loss, grad)
}

fn example_loss<T: Scalar>(params: &[T], layout: &Layout, tokens: &[u16]) -> f64 {
    let fwd = forward(params, layout, &tokens[..tokens.len() - 1]);
    tokens
        .iter()
        .enumerate()
        .map(|(row, &t)| -log_softmax(&fwd.logits(params, layout, row))[usize::from(t)].as_f64())
        .sum()
}

fn mean_loss<T: Scalar>(params: &[T], layout: &Layout, examples: &[&[u16]], exec: Exec) -> f64 {
    let losses = exec.map(examples, |t| example_loss(params, layout, t));
    let tokens: usize = examples.iter().map(|t| t.len()).sum();
    losses.iter().sum::<f64>() / tokens as f64
}

/// Trains a fresh model (initialized from `config.seed`) on the corpus, or on
/// the works selected by `mask`.
pub fn train(
    corpus: &[TrainingExample],
    mask: Option<&[bool]>,
    config: &ModelConfig,
    hyper: &TrainHyper,
) -> Result<ModelCheckpoint, ModelError> {
    config.validate()?;
    if let Some(m) = mask {
        if m.len() != corpus.len() {
            return Err(ModelError::InvalidConfig(format!(
                "subset mask has {} entries for {} examples",
                m.len(),
                corpus.len()
            )));
        }
    }
    for (index, ex) in corpus.iter().enumerate() {
        if ex.tokens.len() != config.context_length {
            return Err(ModelError::BadExample {
                index,
                len: ex.tokens.len(),
                expected: config.context_length,
            });
        }
    }
    let included: Vec<usize> = (0..corpus.len())
        .filter(|&i| mask.is_none_or(|m| m[i]))
        .collect();
    if included.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    if hyper.batch_size == 0 {
        return Err(ModelError::InvalidConfig("batch_size must be positive".into()));
    }

    let init = init_model(config)?;
    let (params, state) = match config.precision {
        Precision::Float32 => {
            let (p, s) = run::<f32>(&init.params, corpus, &included, config, hyper)?;
            (p.into_iter().map(f64::from).collect(), s)
        }
        Precision::Float64 => run::<f64>(&init.params, corpus, &included, config, hyper)?,
    };

    let mut hash_input = Vec::with_capacity(corpus.len() * config.context_length * 2);
    for ex in corpus {
        for t in ex.tokens.tokens() {
            hash_input.extend_from_slice(&t.to_le_bytes());
        }
    }
    Ok(ModelCheckpoint {
        config: config.clone(),
        params,
        provenance: Provenance {
            corpus_hash: Some(seed::sha256_hex(&hash_input)),
            subset_mask: mask.map(<[bool]>::to_vec),
            epochs: hyper.epochs,
            optimizer_state_hash: Some(state.hash),
            initial_loss: Some(state.initial_loss),
            final_loss: Some(state.final_loss),
        },
    })
}

struct RunState {
    hash: String,
    initial_loss: f64,
    final_loss: f64,
}

fn run<T: Scalar>(
    init: &[f64],
    corpus: &[TrainingExample],
    included: &[usize],
    config: &ModelConfig,
    hyper: &TrainHyper,
) -> Result<(Vec<T>, RunState), ModelError> {
    let layout = Layout::new(config);
    let mut params: Vec<T> = init.iter().map(|&p| T::of(p)).collect();
    let mut m = vec![T::zero(); params.len()];
    let mut v = vec![T::zero(); params.len()];
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let lr = T::of(hyper.learning_rate);
    let eps = T::of(hyper.adam_eps);
    let decay = T::of(hyper.weight_decay);

    let windows: Vec<&[u16]> = included.iter().map(|&i| corpus[i].tokens.tokens()).collect();
    let initial_loss = mean_loss(&params, &layout, &windows, hyper.exec);

    let mut rng = seed::rng_for(config.seed, "shuffle");
    let mut order: Vec<usize> = included.to_vec();
    let mut step: i32 = 0;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(hyper.batch_size).enumerate() {
            let results = hyper
                .exec
                .map(batch, |&i| example_grad(&params, &layout, corpus[i].tokens.tokens()));
            let n_tokens = (batch.len() * config.context_length) as f64;
            let mut grad = vec![T::zero(); params.len()];
            let mut loss = 0.0;
            for (l, g) in results {
                loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += *b;
                }
            }
            let loss = loss / n_tokens;
            if !loss.is_finite() {
                return Err(ModelError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    loss,
                });
            }
            epoch_loss += loss * batch.len() as f64;

            step += 1;
            let scale = T::one() / T::of(n_tokens);
            let c1 = T::one() - b1.powi(step);
            let c2 = T::one() - b2.powi(step);
            for j in 0..params.len() {
                let g = grad[j] * scale;
                m[j] = b1 * m[j] + (T::one() - b1) * g;
                v[j] = b2 * v[j] + (T::one() - b2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                let pj = params[j];
                params[j] = pj - lr * (mhat / (vhat.sqrt() + eps) + decay * pj);
            }
        }
        debug!("epoch {epoch}: mean loss {:.4}", epoch_loss / order.len() as f64);
    }
    let final_loss = mean_loss(&params, &layout, &windows, hyper.exec);
    if !final_loss.is_finite() {
        return Err(ModelError::NonFiniteLoss {
            epoch: hyper.epochs,
            batch: 0,
            loss: final_loss,
        });
    }

    let mut bytes = Vec::with_capacity(params.len() * 16);
    for x in m.iter().chain(&v) {
        bytes.extend_from_slice(&x.as_f64().to_le_bytes());
    }
    Ok((
        params,
        RunState {
            hash: seed::sha256_hex(&bytes),
            initial_loss,
            final_loss,
        },
    ))
}

/// Model configuration and hyperparameters used for every (re)training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub config: ModelConfig,
    pub hyper: TrainHyper,
}

impl Trainer {
    pub fn new(config: ModelConfig, hyper: TrainHyper) -> Self {
        Trainer { config, hyper }
    }

    pub fn fit(
        &self,
        corpus: &[TrainingExample],
        mask: Option<&[bool]>,
    ) -> Result<ModelCheckpoint, ModelError> {
        train(corpus, mask, &self.config, &self.hyper)
    }

    /// Same trainer with a different initialization/shuffle seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut t = self.clone();
        t.config.seed = seed;
        t
    }
}
