//! Symbolic-music training, training-data attribution, attribution quality
//! evaluation and attribution-weighted royalty settlement.
//!
//! The pieces, bottom up:
//!
//! - [`midi`]: Standard MIDI File parsing and the 388-event performance vocabulary.
//! - [`model`]: a small autoregressive transformer with exact per-example gradients.
//! - [`attribution`]: retraining ground truth and a random-projection gradient estimator.
//! - [`eval`]: rank correlation against retraining, and style similarity by rank.
//! - [`royalty`]: revenue pools, pro-rata allocation and attribution-weighted statements.

pub mod attribution;
pub mod eval;
pub mod exec;
pub mod midi;
pub mod model;
pub mod royalty;
pub mod seed;

pub use exec::Exec;
