//! Score matrices and their file formats.
//!
//! Binary layout:
//!
//! ```text
//! b"ASCR1" | header length: u64 LE | header: UTF-8 JSON | scores: f64 LE, row-major
//! ```
//!
//! The header holds `{level, sign_convention, n, targets, target_ids,
//! work_ids, estimator}`; rows are targets, columns are training works.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AttributionError, Level};

pub const SCORE_FILE_MAGIC: &[u8; 5] = b"ASCR1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignConvention {
    /// Larger scores mean the work raised the target's likelihood.
    PositiveMeansHelpful,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMatrix {
    pub level: Level,
    pub sign_convention: SignConvention,
    pub target_ids: Vec<String>,
    pub work_ids: Vec<String>,
    /// Row-major `targets x works`.
    pub scores: Vec<f64>,
    /// Echo of the estimator configuration that produced the scores.
    pub estimator: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Header {
    level: Level,
    sign_convention: SignConvention,
    n: usize,
    targets: usize,
    target_ids: Vec<String>,
    work_ids: Vec<String>,
    estimator: serde_json::Value,
}

impl AttributionMatrix {
    pub fn new(
        level: Level,
        sign_convention: SignConvention,
        target_ids: Vec<String>,
        work_ids: Vec<String>,
        scores: Vec<f64>,
        estimator: serde_json::Value,
    ) -> Result<Self, AttributionError> {
        let expected = target_ids.len() * work_ids.len();
        if scores.len() != expected {
            return Err(AttributionError::DimensionMismatch {
                expected,
                found: scores.len(),
            });
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(AttributionError::BadScoreFile(format!("non-finite score at position {i}")));
        }
        Ok(AttributionMatrix {
            level,
            sign_convention,
            target_ids,
            work_ids,
            scores,
            estimator,
        })
    }

    /// Builds a matrix from one score vector per target.
    pub fn from_rows(
        level: Level,
        target_ids: Vec<String>,
        work_ids: Vec<String>,
        rows: &[Vec<f64>],
        estimator: serde_json::Value,
    ) -> Result<Self, AttributionError> {
        let scores = rows.iter().flat_map(|r| r.iter().copied()).collect();
        AttributionMatrix::new(
            level,
            SignConvention::PositiveMeansHelpful,
            target_ids,
            work_ids,
            scores,
            estimator,
        )
    }

    pub fn n_targets(&self) -> usize {
        self.target_ids.len()
    }

    pub fn n_works(&self) -> usize {
        self.work_ids.len()
    }

    pub fn row(&self, target: usize) -> &[f64] {
        let n = self.n_works();
        &self.scores[target * n..(target + 1) * n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.scores.chunks(self.n_works().max(1)).take(self.n_targets())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, AttributionError> {
        let header = serde_json::to_vec(&Header {
            level: self.level,
            sign_convention: self.sign_convention,
            n: self.n_works(),
            targets: self.n_targets(),
            target_ids: self.target_ids.clone(),
            work_ids: self.work_ids.clone(),
            estimator: self.estimator.clone(),
        })?;
        let mut out = Vec::with_capacity(13 + header.len() + self.scores.len() * 8);
        out.extend_from_slice(SCORE_FILE_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for s in &self.scores {
            out.extend_from_slice(&s.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AttributionError> {
        let bad = |m: &str| AttributionError::BadScoreFile(m.to_string());
        if bytes.len() < 13 || &bytes[..5] != SCORE_FILE_MAGIC {
            return Err(bad("missing ASCR1 magic"));
        }
        let len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
        let header_end = 13usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[13..header_end])?;
        if header.n != header.work_ids.len() || header.targets != header.target_ids.len() {
            return Err(bad("header counts disagree with id lists"));
        }
        let body = &bytes[header_end..];
        if body.len() != header.n * header.targets * 8 {
            return Err(bad("score block has the wrong size"));
        }
        let scores = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        AttributionMatrix::new(
            header.level,
            header.sign_convention,
            header.target_ids,
            header.work_ids,
            scores,
            header.estimator,
        )
    }

    pub fn save(&self, path: &Path) -> Result<(), AttributionError> {
        fs::File::create(path)?.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AttributionError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Long-format CSV: `target_id,work_id,score`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), AttributionError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["target_id", "work_id", "score"])?;
        for (t, row) in self.target_ids.iter().zip(self.rows()) {
            for (work, s) in self.work_ids.iter().zip(row) {
                w.write_record([t.as_str(), work.as_str(), &s.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}
