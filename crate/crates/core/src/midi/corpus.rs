//! Training windows, the work registry and their on-disk form.
//!
//! Token file layout (`.arec`):
//!
//! ```text
//! b"AREC1" | token count: u64 LE | tokens: u16 LE * count
//! ```
//!
//! The sidecar manifest (JSON) records, for window `i`, the work id, the
//! rightsholder, the source file and the token offset of the window inside
//! that file's event stream. Windows are stored back to back, each
//! `window_len` tokens long.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EventSequence, MidiError};
use crate::seed::sha256_hex;

pub const TOKEN_FILE_MAGIC: &[u8; 5] = b"AREC1";

/// Splits an event stream into non-overlapping windows of exactly `window_len`
/// tokens, dropping a short tail.
pub fn make_training_windows(
    events: &EventSequence,
    window_len: usize,
) -> Result<Vec<EventSequence>, MidiError> {
    if window_len < 2 {
        return Err(MidiError::WindowTooShort(window_len));
    }
    if events.len() < window_len {
        return Err(MidiError::EmptyInput {
            len: events.len(),
            window_len,
        });
    }
    Ok(events
        .tokens()
        .chunks_exact(window_len)
        .map(|c| EventSequence::new(c.to_vec()).expect("tokens already validated"))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Work {
    pub work_id: String,
    pub rightsholder_id: String,
    pub source: String,
    pub offset: usize,
    pub tokens: EventSequence,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub work_id: String,
    pub rightsholder_id: String,
    pub source_file: String,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub window_len: usize,
    pub windows: Vec<ManifestEntry>,
}

/// Registry of training works, each one fixed-length window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub window_len: usize,
    pub works: Vec<Work>,
}

impl Corpus {
    pub fn new(window_len: usize, works: Vec<Work>) -> Result<Self, MidiError> {
        if let Some(w) = works.iter().find(|w| w.tokens.len() != window_len) {
            return Err(MidiError::BadTokenFile(format!(
                "work {} has {} tokens, expected {window_len}",
                w.work_id,
                w.tokens.len()
            )));
        }
        Ok(Corpus { window_len, works })
    }

    /// Builds a corpus from bare windows, naming works `w000`, `w001`, ...
    pub fn from_windows(window_len: usize, windows: Vec<EventSequence>) -> Result<Self, MidiError> {
        let works = windows
            .into_iter()
            .enumerate()
            .map(|(i, tokens)| Work {
                work_id: format!("w{i:03}"),
                rightsholder_id: format!("r{i:03}"),
                source: String::new(),
                offset: i * window_len,
                tokens,
            })
            .collect();
        Corpus::new(window_len, works)
    }

    pub fn len(&self) -> usize {
        self.works.len()
    }

    pub fn is_empty(&self) -> bool {
        self.works.is_empty()
    }

    pub fn work_ids(&self) -> Vec<String> {
        self.works.iter().map(|w| w.work_id.clone()).collect()
    }

    pub fn manifest(&self) -> CorpusManifest {
        CorpusManifest {
            window_len: self.window_len,
            windows: self
                .works
                .iter()
                .enumerate()
                .map(|(index, w)| ManifestEntry {
                    index,
                    work_id: w.work_id.clone(),
                    rightsholder_id: w.rightsholder_id.clone(),
                    source_file: w.source.clone(),
                    offset: w.offset,
                })
                .collect(),
        }
    }

    /// Hex SHA-256 over the window length and every token, in order.
    pub fn content_hash(&self) -> String {
        let mut bytes = (self.window_len as u64).to_le_bytes().to_vec();
        for w in &self.works {
            for t in w.tokens.tokens() {
                bytes.extend_from_slice(&t.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    pub fn write(&self, tokens_path: &Path, manifest_path: &Path) -> Result<(), MidiError> {
        let all: Vec<u16> = self
            .works
            .iter()
            .flat_map(|w| w.tokens.tokens().iter().copied())
            .collect();
        write_token_file(tokens_path, &all)?;
        fs::write(manifest_path, serde_json::to_vec_pretty(&self.manifest())?)?;
        Ok(())
    }

    pub fn read(tokens_path: &Path, manifest_path: &Path) -> Result<Self, MidiError> {
        let tokens = read_token_file(tokens_path)?;
        let manifest: CorpusManifest = serde_json::from_slice(&fs::read(manifest_path)?)?;
        let n = manifest.windows.len();
        if manifest.window_len == 0 || tokens.len() != n * manifest.window_len {
            return Err(MidiError::BadTokenFile(format!(
                "{} tokens do not fill {n} windows of {}",
                tokens.len(),
                manifest.window_len
            )));
        }
        let works = manifest
            .windows
            .into_iter()
            .zip(tokens.chunks_exact(manifest.window_len.max(1)))
            .map(|(e, chunk)| {
                Ok(Work {
                    work_id: e.work_id,
                    rightsholder_id: e.rightsholder_id,
                    source: e.source_file,
                    offset: e.offset,
                    tokens: EventSequence::new(chunk.to_vec())?,
                })
            })
            .collect::<Result<Vec<_>, MidiError>>()?;
        Corpus::new(manifest.window_len, works)
    }
}

pub fn write_token_file(path: &Path, tokens: &[u16]) -> Result<(), MidiError> {
    let mut buf = Vec::with_capacity(13 + tokens.len() * 2);
    buf.extend_from_slice(TOKEN_FILE_MAGIC);
    buf.extend_from_slice(&(tokens.len() as u64).to_le_bytes());
    for t in tokens {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_token_file(path: &Path) -> Result<Vec<u16>, MidiError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 13 || &bytes[..5] != TOKEN_FILE_MAGIC {
        return Err(MidiError::BadTokenFile("missing AREC1 magic".into()));
    }
    let count = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let body = &bytes[13..];
    if body.len() != count * 2 {
        return Err(MidiError::BadTokenFile(format!(
            "declared {count} tokens, found {} bytes",
            body.len()
        )));
    }
    let tokens: Vec<u16> = body
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    EventSequence::new(tokens.clone())?;
    Ok(tokens)
}
