//! Parameter tensors and their deterministic initialization.
//!
//! Draw order: `embed_w, embed_b`, then for each block in order
//! `ada_w, ada_b, norm1_gain, norm1_bias, wq, bq, wk, bk, wv, bv, wo, bo`,
//! then (cross-attention mode) `norm_x_gain, norm_x_bias, cq, bcq, ck, bck, cv, bcv, co, bco`,
//! then `norm2_gain, norm2_bias, w1, b1, w2, b2`, then (u_skip, second half)
//! `skip_w, skip_b`; finally `unembed_w, unembed_b`. Every entry is uniform in
//! `[-0.02, 0.02]`; norm gains add `1.0` to their draw.

use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::{ConditioningMode, DiTSpec};

const INIT_RANGE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct CrossWeights {
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkipWeights {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    /// `[hs, 6·hs]`: shift1, scale1, gate1, shift2, scale2, gate2.
    pub ada_w: Tensor,
    pub ada_b: Tensor,
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub cross: Option<CrossWeights>,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub skip: Option<SkipWeights>,
}

impl BlockWeights {
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![
            &self.ada_w,
            &self.ada_b,
            &self.norm1_gain,
            &self.norm1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
        ];
        if let Some(c) = &self.cross {
            v.extend([
                &c.norm_gain,
                &c.norm_bias,
                &c.wq,
                &c.bq,
                &c.wk,
                &c.bk,
                &c.wv,
                &c.bv,
                &c.wo,
                &c.bo,
            ]);
        }
        v.extend([
            &self.norm2_gain,
            &self.norm2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]);
        if let Some(s) = &self.skip {
            v.extend([&s.w, &s.b]);
        }
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.ada_w,
            &mut self.ada_b,
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ];
        if let Some(c) = &mut self.cross {
            v.extend([
                &mut c.norm_gain,
                &mut c.norm_bias,
                &mut c.wq,
                &mut c.bq,
                &mut c.wk,
                &mut c.bk,
                &mut c.wv,
                &mut c.bv,
                &mut c.wo,
                &mut c.bo,
            ]);
        }
        v.extend([
            &mut self.norm2_gain,
            &mut self.norm2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]);
        if let Some(s) = &mut self.skip {
            v.extend([&mut s.w, &mut s.b]);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub unembed_w: Tensor,
    pub unembed_b: Tensor,
}

fn draw(rng: &mut SeededRng, shape: &[usize]) -> Tensor {
    rng.uniform_tensor(shape, -INIT_RANGE, INIT_RANGE)
}

fn draw_gain(rng: &mut SeededRng, n: usize) -> Tensor {
    draw(rng, &[n]).map(|v| 1.0 + v)
}

impl Weights {
    pub fn init(spec: &DiTSpec, rng: &mut SeededRng) -> Self {
        let hs = spec.hidden_size;
        let c = spec.latent_channels;
        let f = spec.ffn_hidden();
        let embed_w = draw(rng, &[c, hs]);
        let embed_b = draw(rng, &[hs]);
        let mut blocks = Vec::with_capacity(spec.num_layers);
        for j in 0..spec.num_layers {
            let ada_w = draw(rng, &[hs, 6 * hs]);
            let ada_b = draw(rng, &[6 * hs]);
            let norm1_gain = draw_gain(rng, hs);
            let norm1_bias = draw(rng, &[hs]);
            let wq = draw(rng, &[hs, hs]);
            let bq = draw(rng, &[hs]);
            let wk = draw(rng, &[hs, hs]);
            let bk = draw(rng, &[hs]);
            let wv = draw(rng, &[hs, hs]);
            let bv = draw(rng, &[hs]);
            let wo = draw(rng, &[hs, hs]);
            let bo = draw(rng, &[hs]);
            let cross = (spec.conditioning == ConditioningMode::CrossAttention).then(|| CrossWeights {
                norm_gain: draw_gain(rng, hs),
                norm_bias: draw(rng, &[hs]),
                wq: draw(rng, &[hs, hs]),
                bq: draw(rng, &[hs]),
                wk: draw(rng, &[hs, hs]),
                bk: draw(rng, &[hs]),
                wv: draw(rng, &[hs, hs]),
                bv: draw(rng, &[hs]),
                wo: draw(rng, &[hs, hs]),
                bo: draw(rng, &[hs]),
            });
            let norm2_gain = draw_gain(rng, hs);
            let norm2_bias = draw(rng, &[hs]);
            let w1 = draw(rng, &[hs, f]);
            let b1 = draw(rng, &[f]);
            let w2 = draw(rng, &[f, hs]);
            let b2 = draw(rng, &[hs]);
            let skip = spec.skip_source(j).map(|_| SkipWeights {
                w: draw(rng, &[hs, hs]),
                b: draw(rng, &[hs]),
            });
            blocks.push(BlockWeights {
                ada_w,
                ada_b,
                norm1_gain,
                norm1_bias,
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                cross,
                norm2_gain,
                norm2_bias,
                w1,
                b1,
                w2,
                b2,
                skip,
            });
        }
        let unembed_w = draw(rng, &[hs, c]);
        let unembed_b = draw(rng, &[c]);
        Self {
            embed_w,
            embed_b,
            blocks,
            unembed_w,
            unembed_b,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.embed_w, &self.embed_b];
        for b in &self.blocks {
            v.extend(b.tensors());
        }
        v.extend([&self.unembed_w, &self.unembed_b]);
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn embed_param_count(&self) -> usize {
        self.embed_w.len() + self.embed_b.len()
    }

    pub fn unembed_param_count(&self) -> usize {
        self.unembed_w.len() + self.unembed_b.len()
    }

    /// Zeroes the AdaLN map of every block.
    pub fn zero_modulation(&mut self) {
        for b in &mut self.blocks {
            b.ada_w = Tensor::zeros(b.ada_w.shape());
            b.ada_b = Tensor::zeros(b.ada_b.shape());
        }
    }

    /// Zeroes every skip projection.
    pub fn zero_skips(&mut self) {
        for b in &mut self.blocks {
            if let Some(s) = &mut b.skip {
                s.w = Tensor::zeros(s.w.shape());
                s.b = Tensor::zeros(s.b.shape());
            }
        }
    }

    /// Flat parameter vector in draw order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Rebuilds weights for `spec` from a flat vector in draw order.
    pub fn unflatten(spec: &DiTSpec, flat: &[f64]) -> Option<Self> {
        let mut w = Self::init(spec, &mut SeededRng::new(0));
        if flat.len() != w.param_count() {
            return None;
        }
        let mut at = 0;
        let mut fill = |t: &mut Tensor| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        };
        fill(&mut w.embed_w);
        fill(&mut w.embed_b);
        for b in &mut w.blocks {
            for t in b.tensors_mut() {
                fill(t);
            }
        }
        fill(&mut w.unembed_w);
        fill(&mut w.unembed_b);
        Some(w)
    }
}

/// Closed-form parameter count for a spec.
pub fn param_count(spec: &DiTSpec) -> usize {
    let hs = spec.hidden_size;
    let c = spec.latent_channels;
    let f = spec.ffn_hidden();
    let l = spec.num_layers;
    let attn = 4 * (hs * hs + hs);
    let per_block = (6 * hs * hs + 6 * hs) + 2 * hs + attn + 2 * hs + (2 * hs * f + f + hs);
    let cross = if spec.conditioning == ConditioningMode::CrossAttention {
        2 * hs + attn
    } else {
        0
    };
    let skips = match spec.topology {
        super::BlockTopology::USkip => (l / 2) * (hs * hs + hs),
        super::BlockTopology::Linear => 0,
    };
    (c * hs + hs) + l * (per_block + cross) + skips + (hs * c + c)
}
