//! MIDI ingestion and the 388-event performance vocabulary.

mod corpus;
mod smf;
pub mod toy;
mod vocab;

pub use corpus::{
    make_training_windows, read_token_file, write_token_file, Corpus, CorpusManifest, ManifestEntry,
    Work, TOKEN_FILE_MAGIC,
};
pub use smf::{parse_midi, parse_midi_with, write_midi, ParseOptions, ParseReport};
pub use vocab::{
    detokenize, detokenize_with_report, tokenize, tokenize_with, Event, EventSequence,
    TokenizeOptions, VocabularyLayout, bin_velocity, velocity_bin, DEFAULT_VELOCITY_BIN,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MidiError {
    #[error("malformed MIDI header: {0}")]
    MalformedHeader(&'static str),
    #[error("chunk truncated at byte {offset}")]
    TruncatedChunk { offset: usize },
    #[error("unsupported SMF format {0}")]
    UnsupportedFormat(u16),
    #[error("malformed event at byte {offset}: {reason}")]
    MalformedEvent { offset: usize, reason: &'static str },
    #[error("token sequence of length {len} is shorter than the window length {window_len}")]
    EmptyInput { len: usize, window_len: usize },
    #[error("window length must be at least 2, got {0}")]
    WindowTooShort(usize),
    #[error("token {0} is outside the vocabulary")]
    InvalidToken(u32),
    #[error("bad token file: {0}")]
    BadTokenFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A single note with times in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub pitch: u8,
    pub velocity: u8,
    pub onset: f64,
    pub offset: f64,
}

impl Note {
    pub fn is_valid(&self) -> bool {
        self.pitch <= 127
            && (1..=127).contains(&self.velocity)
            && self.onset.is_finite()
            && self.offset.is_finite()
            && self.onset >= 0.0
            && self.offset > self.onset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteSequence {
    /// Sorted by `(onset, pitch)`.
    pub notes: Vec<Note>,
    pub ticks_per_quarter: u16,
    pub source_path: String,
}

impl NoteSequence {
    pub fn new(mut notes: Vec<Note>, ticks_per_quarter: u16, source_path: String) -> Self {
        sort_notes(&mut notes);
        NoteSequence {
            notes,
            ticks_per_quarter,
            source_path,
        }
    }

    pub fn from_notes(notes: Vec<Note>) -> Self {
        Self::new(notes, 480, String::new())
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }
}

pub(crate) fn sort_notes(notes: &mut [Note]) {
    notes.sort_by(|a, b| {
        a.onset
            .total_cmp(&b.onset)
            .then(a.pitch.cmp(&b.pitch))
            .then(a.offset.total_cmp(&b.offset))
            .then(a.velocity.cmp(&b.velocity))
    });
}
