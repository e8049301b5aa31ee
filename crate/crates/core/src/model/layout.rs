//! Flat parameter layout.
//!
//! Parameters are stored in one vector in this order (matrices row-major,
//! `[in][out]`):
//!
//! ```text
//! token_embedding   [vocab][d]
//! bos_embedding     [d]
//! position_embedding[context_length + 1][d]
//! per layer:
//!   ln1.gain [d]   ln1.bias [d]
//!   attn.qkv [d][3d]   attn.qkv_bias [3d]
//!   attn.out [d][d]    attn.out_bias [d]
//!   ln2.gain [d]   ln2.bias [d]
//!   mlp.fc   [d][hidden]   mlp.fc_bias [hidden]
//!   mlp.proj [hidden][d]   mlp.proj_bias [d]
//! final_ln.gain [d]   final_ln.bias [d]
//! output [d][vocab]   output_bias [vocab]
//! ```

use std::ops::Range;

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLayout {
    pub ln1_gain: Range<usize>,
    pub ln1_bias: Range<usize>,
    pub qkv: Range<usize>,
    pub qkv_bias: Range<usize>,
    pub attn_out: Range<usize>,
    pub attn_out_bias: Range<usize>,
    pub ln2_gain: Range<usize>,
    pub ln2_bias: Range<usize>,
    pub fc: Range<usize>,
    pub fc_bias: Range<usize>,
    pub proj: Range<usize>,
    pub proj_bias: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub vocab: usize,
    pub d: usize,
    pub heads: usize,
    pub hidden: usize,
    /// Rows of the position table: the BOS slot plus `context_length` tokens.
    pub positions: usize,
    pub token_embedding: Range<usize>,
    pub bos: Range<usize>,
    pub position_embedding: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub final_gain: Range<usize>,
    pub final_bias: Range<usize>,
    pub output: Range<usize>,
    pub output_bias: Range<usize>,
    pub total: usize,
}

struct Cursor(usize);

impl Cursor {
    fn take(&mut self, n: usize) -> Range<usize> {
        let r = self.0..self.0 + n;
        self.0 += n;
        r
    }
}

impl Layout {
    pub fn new(config: &ModelConfig) -> Self {
        let (v, d, h) = (config.vocab_size, config.embed_dim, config.hidden_dim);
        let positions = config.context_length + 1;
        let mut c = Cursor(0);
        let token_embedding = c.take(v * d);
        let bos = c.take(d);
        let position_embedding = c.take(positions * d);
        let layers = (0..config.num_layers)
            .map(|_| LayerLayout {
                ln1_gain: c.take(d),
                ln1_bias: c.take(d),
                qkv: c.take(d * 3 * d),
                qkv_bias: c.take(3 * d),
                attn_out: c.take(d * d),
                attn_out_bias: c.take(d),
                ln2_gain: c.take(d),
                ln2_bias: c.take(d),
                fc: c.take(d * h),
                fc_bias: c.take(h),
                proj: c.take(h * d),
                proj_bias: c.take(d),
            })
            .collect();
        let final_gain = c.take(d);
        let final_bias = c.take(d);
        let output = c.take(d * v);
        let output_bias = c.take(v);
        Layout {
            vocab: v,
            d,
            heads: config.num_heads,
            hidden: h,
            positions,
            token_embedding,
            bos,
            position_embedding,
            layers,
            final_gain,
            final_bias,
            output,
            output_bias,
            total: c.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}
