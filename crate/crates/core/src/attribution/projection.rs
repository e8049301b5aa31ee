use nalgebra::DMatrix;
use rand::RngCore;

use super::AttributionError;
use crate::seed;

/// Parameter rows generated and multiplied per block.
const BLOCK_ROWS: usize = 2048;

/// Random `input_dim x dim` sign matrix scaled by `1/sqrt(dim)`, regenerated
/// from its seed on demand instead of stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignProjection {
    pub seed: u64,
    pub input_dim: usize,
    pub dim: usize,
}

impl SignProjection {
    pub fn new(seed: u64, input_dim: usize, dim: usize) -> Self {
        SignProjection { seed, input_dim, dim }
    }

    /// Projects each vector; row `i` of the result is `P^T v_i / sqrt(dim)`.
    pub fn project(&self, vectors: &[&[f64]]) -> Result<DMatrix<f64>, AttributionError> {
        for v in vectors {
            if v.len() != self.input_dim {
                return Err(AttributionError::DimensionMismatch {
                    expected: self.input_dim,
                    found: v.len(),
                });
            }
        }
        let m = vectors.len();
        let mut out = DMatrix::<f64>::zeros(m, self.dim);
        let mut rng = seed::rng(self.seed);
        let words_per_row = self.dim.div_ceil(64);
        let mut start = 0;
        while start < self.input_dim {
            let rows = BLOCK_ROWS.min(self.input_dim - start);
            let mut signs = DMatrix::<f64>::zeros(rows, self.dim);
            for r in 0..rows {
                for w in 0..words_per_row {
                    let bits = rng.next_u64();
                    for b in 0..64.min(self.dim - w * 64) {
                        signs[(r, w * 64 + b)] = if bits >> b & 1 == 1 { 1.0 } else { -1.0 };
                    }
                }
            }
            let block = DMatrix::<f64>::from_fn(m, rows, |i, j| vectors[i][start + j]);
            out.gemm(1.0, &block, &signs, 1.0);
            start += rows;
        }
        out /= (self.dim as f64).sqrt();
        Ok(out)
    }
}
