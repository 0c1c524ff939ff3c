//! Floating-point operation counts shared by the engines and the planner.
//!
//! Only matrix products and attention are counted; elementwise work is
//! ignored.

use crate::model::{ConditioningMode, DiTSpec};

pub fn linear(rows: usize, inputs: usize, outputs: usize) -> f64 {
    2.0 * rows as f64 * inputs as f64 * outputs as f64
}

/// Scores plus weighted sum for `q_rows` queries over `keys` keys of total
/// width `width` (summed over heads).
pub fn attention(q_rows: usize, keys: usize, width: usize) -> f64 {
    4.0 * q_rows as f64 * keys as f64 * width as f64
}

pub fn modulation(spec: &DiTSpec) -> f64 {
    linear(1, spec.hidden_size, 6 * spec.hidden_size)
}

pub fn qkv(spec: &DiTSpec, rows: usize) -> f64 {
    3.0 * linear(rows, spec.hidden_size, spec.hidden_size)
}

pub fn out_proj(spec: &DiTSpec, rows: usize) -> f64 {
    linear(rows, spec.hidden_size, spec.hidden_size)
}

/// Cross-attention for `rows` queries, excluding the cached text K/V.
pub fn cross(spec: &DiTSpec, rows: usize) -> f64 {
    match spec.conditioning {
        ConditioningMode::CrossAttention => {
            2.0 * linear(rows, spec.hidden_size, spec.hidden_size)
                + attention(rows, spec.text_tokens, spec.hidden_size)
        }
        _ => 0.0,
    }
}

/// Text K/V projections, computed once per run per block and branch.
pub fn cross_kv(spec: &DiTSpec) -> f64 {
    match spec.conditioning {
        ConditioningMode::CrossAttention => 2.0 * linear(spec.text_tokens, spec.hidden_size, spec.hidden_size),
        _ => 0.0,
    }
}

pub fn ffn(spec: &DiTSpec, rows: usize) -> f64 {
    2.0 * linear(rows, spec.hidden_size, spec.ffn_hidden())
}

pub fn skip(spec: &DiTSpec, rows: usize) -> f64 {
    linear(rows, spec.hidden_size, spec.hidden_size)
}

pub fn embed(spec: &DiTSpec, image_rows: usize) -> f64 {
    linear(image_rows, spec.latent_channels, spec.hidden_size)
}

pub fn unembed(spec: &DiTSpec, image_rows: usize) -> f64 {
    linear(image_rows, spec.hidden_size, spec.latent_channels)
}

/// One block over all rows, excluding self-attention scores.
pub fn block_dense(spec: &DiTSpec, block: usize, rows: usize) -> f64 {
    let mut f = modulation(spec) + qkv(spec, rows) + out_proj(spec, rows) + cross(spec, rows) + ffn(spec, rows);
    if spec.skip_source(block).is_some() {
        f += skip(spec, rows);
    }
    f
}

/// Self-attention scores of one block over the full sequence.
pub fn block_attention(spec: &DiTSpec) -> f64 {
    let s = spec.seq_len();
    attention(s, s, spec.hidden_size)
}

/// Same-size 2-D convolution producing `rows × width` output pixels.
pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, rows: usize, width: usize) -> f64 {
    2.0 * (in_channels * out_channels * kernel * kernel) as f64 * (rows * width) as f64
}

/// One full forward pass of one branch.
pub fn forward(spec: &DiTSpec) -> f64 {
    let s = spec.seq_len();
    let blocks: f64 = (0..spec.num_layers)
        .map(|b| block_dense(spec, b, s) + block_attention(spec))
        .sum();
    embed(spec, spec.image_tokens) + blocks + unembed(spec, spec.image_tokens)
}
