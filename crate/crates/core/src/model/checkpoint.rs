//! Model checkpoints and their file format.
//!
//! ```text
//! b"ACKP1" | header length: u64 LE | header: UTF-8 JSON | params
//! ```
//!
//! The header holds `{config, provenance, param_count}`. Parameters follow in
//! [`Layout`](super::Layout) order as little-endian `f32` or `f64`, matching
//! `config.precision`.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layout::Layout;
use super::{ModelConfig, ModelError, Precision};
use crate::seed;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ACKP1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub corpus_hash: Option<String>,
    /// Training-set membership over the corpus, when trained on a subset.
    pub subset_mask: Option<Vec<bool>>,
    pub epochs: usize,
    pub optimizer_state_hash: Option<String>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub config: ModelConfig,
    /// Flat parameters in layout order. For `Float32` checkpoints every value
    /// is exactly representable as `f32`.
    pub params: Vec<f64>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    provenance: Provenance,
    param_count: usize,
}

/// Deterministic initialization from `config.seed`.
///
/// Linear weights are uniform in `±1/sqrt(fan_in)` (residual projections
/// additionally scaled by `1/sqrt(2 * layers)`), embeddings uniform in
/// `±0.1`, LayerNorm gains one, biases and the output projection zero, so a
/// fresh model predicts the uniform distribution.
pub fn init_model(config: &ModelConfig) -> Result<ModelCheckpoint, ModelError> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = seed::rng_for(config.seed, "init");
    let mut params = vec![0.0f64; layout.total];
    let mut fill = |params: &mut [f64], range: std::ops::Range<usize>, bound: f64| {
        for p in &mut params[range] {
            *p = rng.random_range(-bound..bound);
        }
    };
    fill(&mut params, layout.token_embedding.clone(), 0.1);
    fill(&mut params, layout.bos.clone(), 0.1);
    fill(&mut params, layout.position_embedding.clone(), 0.1);
    let d = layout.d as f64;
    let residual = 1.0 / (2.0 * layout.layers.len() as f64).sqrt();
    for l in &layout.layers {
        params[l.ln1_gain.clone()].fill(1.0);
        params[l.ln2_gain.clone()].fill(1.0);
        fill(&mut params, l.qkv.clone(), 1.0 / d.sqrt());
        fill(&mut params, l.attn_out.clone(), residual / d.sqrt());
        fill(&mut params, l.fc.clone(), 1.0 / d.sqrt());
        fill(&mut params, l.proj.clone(), residual / (layout.hidden as f64).sqrt());
    }
    params[layout.final_gain.clone()].fill(1.0);
    if config.precision == Precision::Float32 {
        for p in &mut params {
            *p = f64::from(*p as f32);
        }
    }
    Ok(ModelCheckpoint {
        config: config.clone(),
        params,
        provenance: Provenance::default(),
    })
}

impl ModelCheckpoint {
    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Hex SHA-256 of the parameters as little-endian `f64`.
    pub fn params_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        seed::sha256_hex(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            provenance: self.provenance.clone(),
            param_count: self.params.len(),
        })?;
        let width = match self.config.precision {
            Precision::Float32 => 4,
            Precision::Float64 => 8,
        };
        let mut out = Vec::with_capacity(13 + header.len() + self.params.len() * width);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for &p in &self.params {
            match self.config.precision {
                Precision::Float32 => out.extend_from_slice(&(p as f32).to_le_bytes()),
                Precision::Float64 => out.extend_from_slice(&p.to_le_bytes()),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::BadCheckpoint(m.to_string());
        if bytes.len() < 13 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(bad("missing ACKP1 magic"));
        }
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(13..).ok_or_else(|| bad("truncated"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        header.config.validate()?;
        let expected = Layout::new(&header.config).total;
        if header.param_count != expected {
            return Err(bad("parameter count does not match config"));
        }
        let data = &body[hlen..];
        let params: Vec<f64> = match header.config.precision {
            Precision::Float32 => {
                if data.len() != expected * 4 {
                    return Err(bad("parameter block has the wrong size"));
                }
                data.chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect()
            }
            Precision::Float64 => {
                if data.len() != expected * 8 {
                    return Err(bad("parameter block has the wrong size"));
                }
                data.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect()
            }
        };
        if params.iter().any(|p| !p.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Ok(ModelCheckpoint {
            config: header.config,
            params,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
