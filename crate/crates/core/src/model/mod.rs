//! Autoregressive next-event model over the performance vocabulary.

mod checkpoint;
mod generate;
mod infer;
mod layout;
mod scalar;
mod train;
mod transformer;

pub use checkpoint::{init_model, ModelCheckpoint, Provenance, CHECKPOINT_MAGIC};
pub use generate::{generate, Sampling};
pub use infer::{
    event_log_probs, event_output_gradient, next_event_distribution, per_example_gradient,
    sequence_log_likelihood, EventGradient, GradientTarget, OutputFn,
};
pub use layout::{LayerLayout, Layout};
pub use scalar::Scalar;
pub use train::{train, SubsetMask, TrainHyper, Trainer, TrainingExample};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::midi::MidiError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("context must contain at least one event")]
    EmptyContext,
    #[error("prompt must contain at least one event")]
    EmptyPrompt,
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("training example {index} has {len} tokens, expected {expected}")]
    BadExample { index: usize, len: usize, expected: usize },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Tokens(#[from] MidiError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Float32,
    Float64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Longest context the model attends to (and the training window length).
    pub context_length: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 388,
            context_length: 256,
            embed_dim: 128,
            num_layers: 2,
            num_heads: 4,
            hidden_dim: 512,
            seed: 0,
            precision: Precision::Float32,
        }
    }
}

impl ModelConfig {
    /// A ~45k-parameter configuration that trains in seconds on one core.
    pub fn desk(context_length: usize) -> Self {
        ModelConfig {
            context_length,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            hidden_dim: 64,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.vocab_size == 0 || self.vocab_size > usize::from(u16::MAX) {
            return bad(format!("vocab_size {} out of range", self.vocab_size));
        }
        if self.context_length < 2 {
            return bad(format!("context_length {} < 2", self.context_length));
        }
        if self.embed_dim == 0 || self.num_heads == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return bad("embed_dim, num_heads, hidden_dim and num_layers must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}
