//! Block forward, split into the phases the parallel engines call one by one.
//!
//! Every phase except attention is row-wise, so a caller holding any subset
//! of the token rows gets exactly the rows the serial forward would produce.

use crate::error::Result;
use crate::tensor::{attention, gelu, layer_norm, linear, Tensor, LAYER_NORM_EPS};

use super::{BlockWeights, CrossWeights, DiTSpec, SkipWeights, Weights};

/// Per-block AdaLN outputs, each of length `hs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Modulation {
    pub shift1: Tensor,
    pub scale1: Tensor,
    pub gate1: Tensor,
    pub shift2: Tensor,
    pub scale2: Tensor,
    pub gate2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Qkv {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockOutput {
    pub out: Tensor,
    /// Keys and values computed from the block input rows.
    pub k: Tensor,
    pub v: Tensor,
}

/// Sinusoidal embedding of `t`, plus the conditioning vector in AdaLN mode.
pub fn timestep_vector(spec: &DiTSpec, t: usize, adaln_cond: Option<&Tensor>) -> Result<Tensor> {
    let hs = spec.hidden_size;
    let half = hs / 2;
    let mut e = vec![0.0; hs];
    for i in 0..half {
        let freq = (-(i as f64) / half as f64 * 10_000f64.ln()).exp();
        let a = t as f64 * freq;
        e[i] = a.sin();
        e[half + i] = a.cos();
    }
    let e = Tensor::vector(e);
    match adaln_cond {
        Some(c) => Ok(e.add(c)?),
        None => Ok(e),
    }
}

pub fn modulation(bw: &BlockWeights, g: &Tensor) -> Result<Modulation> {
    let hs = g.len();
    let row = g.clone().reshape(&[1, hs])?;
    let m = linear(&row, &bw.ada_w, &bw.ada_b)?.reshape(&[6 * hs])?;
    let part = |i: usize| m.slice_vec(i * hs..(i + 1) * hs);
    Ok(Modulation {
        shift1: part(0),
        scale1: part(1),
        gate1: part(2),
        shift2: part(3),
        scale2: part(4),
        gate2: part(5),
    })
}

fn modulate(x: &Tensor, gain: &Tensor, bias: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let n = layer_norm(x, gain, bias, LAYER_NORM_EPS)?;
    let one_plus = scale.map(|s| 1.0 + s);
    Ok(n.mul_row_vector(&one_plus)?.add_row_vector(shift)?)
}

pub fn modulated_norm1(x: &Tensor, bw: &BlockWeights, m: &Modulation) -> Result<Tensor> {
    modulate(x, &bw.norm1_gain, &bw.norm1_bias, &m.shift1, &m.scale1)
}

pub fn qkv(h: &Tensor, bw: &BlockWeights) -> Result<Qkv> {
    Ok(Qkv {
        q: linear(h, &bw.wq, &bw.bq)?,
        k: linear(h, &bw.wk, &bw.bk)?,
        v: linear(h, &bw.wv, &bw.bv)?,
    })
}

pub fn head_scale(spec: &DiTSpec) -> f64 {
    1.0 / (spec.head_dim() as f64).sqrt()
}

/// Per-head attention over column blocks of width `head_dim`; heads are
/// concatenated back in column order.
pub fn attention_heads(q: &Tensor, k: &Tensor, v: &Tensor, head_dim: usize, scale: f64) -> Result<Tensor> {
    let heads = q.cols() / head_dim;
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * head_dim..(h + 1) * head_dim;
        outs.push(attention(
            &q.slice_cols(cols.clone()),
            &k.slice_cols(cols.clone()),
            &v.slice_cols(cols),
            scale,
        )?);
    }
    let refs: Vec<&Tensor> = outs.iter().collect();
    Ok(Tensor::concat_cols(&refs)?)
}

/// `x + (1 + gate) ⊙ out`.
pub fn gated_residual(x: &Tensor, out: &Tensor, gate: &Tensor) -> Result<Tensor> {
    let one_plus = gate.map(|g| 1.0 + g);
    Ok(x.add(&out.mul_row_vector(&one_plus)?)?)
}

/// Output projection and gated residual after self-attention.
pub fn attn_residual(x: &Tensor, o: &Tensor, bw: &BlockWeights, m: &Modulation) -> Result<Tensor> {
    gated_residual(x, &linear(o, &bw.wo, &bw.bo)?, &m.gate1)
}

/// Text keys and values for cross-attention.
pub fn cross_kv(cw: &CrossWeights, text: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((linear(text, &cw.wk, &cw.bk)?, linear(text, &cw.wv, &cw.bv)?))
}

/// Cross-attention over the text with an ungated residual.
pub fn cross_attention(
    spec: &DiTSpec,
    x: &Tensor,
    cw: &CrossWeights,
    text_k: &Tensor,
    text_v: &Tensor,
) -> Result<Tensor> {
    let h = layer_norm(x, &cw.norm_gain, &cw.norm_bias, LAYER_NORM_EPS)?;
    let q = linear(&h, &cw.wq, &cw.bq)?;
    let o = attention_heads(&q, text_k, text_v, spec.head_dim(), head_scale(spec))?;
    Ok(x.add(&linear(&o, &cw.wo, &cw.bo)?)?)
}

pub fn modulated_norm2(x: &Tensor, bw: &BlockWeights, m: &Modulation) -> Result<Tensor> {
    modulate(x, &bw.norm2_gain, &bw.norm2_bias, &m.shift2, &m.scale2)
}

pub fn ffn_residual(x: &Tensor, bw: &BlockWeights, m: &Modulation) -> Result<Tensor> {
    let h = modulated_norm2(x, bw, m)?;
    let y = linear(&gelu(&linear(&h, &bw.w1, &bw.b1)?), &bw.w2, &bw.b2)?;
    gated_residual(x, &y, &m.gate2)
}

/// `x + saved · W_skip + b_skip`.
pub fn skip_merge(x: &Tensor, saved: &Tensor, sw: &SkipWeights) -> Result<Tensor> {
    Ok(x.add(&linear(saved, &sw.w, &sw.b)?)?)
}

pub fn embed_tokens(x: &Tensor, w: &Weights) -> Result<Tensor> {
    Ok(linear(x, &w.embed_w, &w.embed_b)?)
}

pub fn unembed_rows(h: &Tensor, w: &Weights) -> Result<Tensor> {
    Ok(linear(h, &w.unembed_w, &w.unembed_b)?)
}

/// One block on the full sequence `x`.
///
/// `g` is the step vector from [`timestep_vector`]; `text` is the raw text
/// tensor in cross-attention mode. With `kv_override` the attention reads
/// those keys/values instead of the fresh ones, which are still returned.
/// The skip merge (u_skip) is applied by the caller before this call.
pub fn block_forward(
    spec: &DiTSpec,
    weights: &Weights,
    block_idx: usize,
    x: &Tensor,
    g: &Tensor,
    text: Option<&Tensor>,
    kv_override: Option<(&Tensor, &Tensor)>,
) -> Result<BlockOutput> {
    let bw = &weights.blocks[block_idx];
    let m = modulation(bw, g)?;
    let h = modulated_norm1(x, bw, &m)?;
    let Qkv { q, k, v } = qkv(&h, bw)?;
    let (ka, va) = kv_override.unwrap_or((&k, &v));
    let o = attention_heads(&q, ka, va, spec.head_dim(), head_scale(spec))?;
    let mut x1 = attn_residual(x, &o, bw, &m)?;
    if let (Some(cw), Some(text)) = (&bw.cross, text) {
        let (tk, tv) = cross_kv(cw, text)?;
        x1 = cross_attention(spec, &x1, cw, &tk, &tv)?;
    }
    let out = ffn_residual(&x1, bw, &m)?;
    Ok(BlockOutput { out, k, v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BlockTopology, ConditioningMode};
    use crate::rng::SeededRng;
    use crate::tensor::matmul;

    fn setup(mode: ConditioningMode) -> (DiTSpec, Weights, Tensor, Tensor, Option<Tensor>) {
        let spec = DiTSpec::desk(mode, BlockTopology::Linear);
        let mut rng = SeededRng::new(12);
        let w = Weights::init(&spec, &mut rng);
        let x = rng.normal_tensor(&[10, spec.hidden_size]);
        let g = timestep_vector(&spec, 3, None).unwrap();
        let text = (mode == ConditioningMode::CrossAttention).then(|| rng.normal_tensor(&[spec.text_tokens, 32]));
        (spec, w, x, g, text)
    }

    #[test]
    fn override_with_own_kv_is_identity() {
        for mode in ConditioningMode::ALL {
            let (spec, w, x, g, text) = setup(mode);
            let a = block_forward(&spec, &w, 1, &x, &g, text.as_ref(), None).unwrap();
            let b = block_forward(&spec, &w, 1, &x, &g, text.as_ref(), Some((&a.k, &a.v))).unwrap();
            assert!(a.out.bit_eq(&b.out));
        }
    }

    #[test]
    fn zero_modulation_map_gives_plain_norm() {
        let (spec, mut w, x, _, _) = setup(ConditioningMode::AdalnZero);
        w.zero_modulation();
        let zero = Tensor::zeros(&[spec.hidden_size]);
        let m = modulation(&w.blocks[0], &zero).unwrap();
        let bw = &w.blocks[0];
        let plain = layer_norm(&x, &bw.norm1_gain, &bw.norm1_bias, LAYER_NORM_EPS).unwrap();
        assert!(modulated_norm1(&x, bw, &m).unwrap().bit_eq(&plain));
        assert!(m.gate1.data().iter().all(|v| *v == 0.0));
    }

    /// Straight-line re-implementation with explicit loops for the
    /// elementwise parts and no shared helpers beyond matmul and softmax.
    fn reference_block(spec: &DiTSpec, bw: &BlockWeights, x: &Tensor, g: &Tensor, text: Option<&Tensor>) -> Tensor {
        let hs = spec.hidden_size;
        let (s, d) = (x.rows(), spec.head_dim());
        let lin = |a: &Tensor, w: &Tensor, b: &Tensor| {
            let mut o = matmul(a, w).unwrap();
            let n = o.cols();
            for i in 0..o.rows() {
                for j in 0..n {
                    o.data_mut()[i * n + j] += b.data()[j];
                }
            }
            o
        };
        let norm = |a: &Tensor, gain: &Tensor, bias: &Tensor| {
            let mut o = a.clone();
            let n = a.cols();
            for i in 0..a.rows() {
                let r = a.row(i);
                let mu: f64 = r.iter().sum::<f64>() / n as f64;
                let var: f64 = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                for j in 0..n {
                    o.data_mut()[i * n + j] = (r[j] - mu) / (var + 1e-5).sqrt() * gain.data()[j] + bias.data()[j];
                }
            }
            o
        };
        let mods = lin(&g.clone().reshape(&[1, hs]).unwrap(), &bw.ada_w, &bw.ada_b);
        let md = |k: usize, j: usize| mods.data()[k * hs + j];
        let mut h = norm(x, &bw.norm1_gain, &bw.norm1_bias);
        for i in 0..s {
            for j in 0..hs {
                let v = &mut h.data_mut()[i * hs + j];
                *v = *v * (1.0 + md(1, j)) + md(0, j);
            }
        }
        let attn = |q: &Tensor, k: &Tensor, v: &Tensor| {
            let mut o = Tensor::zeros(&[q.rows(), hs]);
            for head in 0..spec.num_heads {
                for i in 0..q.rows() {
                    let logits: Vec<f64> = (0..k.rows())
                        .map(|r| (0..d).map(|c| q.get2(i, head * d + c) * k.get2(r, head * d + c)).sum::<f64>() / (d as f64).sqrt())
                        .collect();
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let ex: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                    let z: f64 = ex.iter().sum();
                    for c in 0..d {
                        o.data_mut()[i * hs + head * d + c] =
                            (0..k.rows()).map(|r| ex[r] / z * v.get2(r, head * d + c)).sum();
                    }
                }
            }
            o
        };
        let q = lin(&h, &bw.wq, &bw.bq);
        let k = lin(&h, &bw.wk, &bw.bk);
        let v = lin(&h, &bw.wv, &bw.bv);
        let a = lin(&attn(&q, &k, &v), &bw.wo, &bw.bo);
        let mut x1 = x.clone();
        for i in 0..s {
            for j in 0..hs {
                x1.data_mut()[i * hs + j] += (1.0 + md(2, j)) * a.get2(i, j);
            }
        }
        if let (Some(cw), Some(t)) = (&bw.cross, text) {
            let hq = lin(&norm(&x1, &cw.norm_gain, &cw.norm_bias), &cw.wq, &cw.bq);
            let tk = lin(t, &cw.wk, &cw.bk);
            let tv = lin(t, &cw.wv, &cw.bv);
            let c = lin(&attn(&hq, &tk, &tv), &cw.wo, &cw.bo);
            x1 = x1.add(&c).unwrap();
        }
        let mut h2 = norm(&x1, &bw.norm2_gain, &bw.norm2_bias);
        for i in 0..s {
            for j in 0..hs {
                let v = &mut h2.data_mut()[i * hs + j];
                *v = *v * (1.0 + md(4, j)) + md(3, j);
            }
        }
        let mut f = lin(&h2, &bw.w1, &bw.b1);
        for v in f.data_mut() {
            let u = *v;
            *v = 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh());
        }
        let y = lin(&f, &bw.w2, &bw.b2);
        let mut out = x1.clone();
        for i in 0..s {
            for j in 0..hs {
                out.data_mut()[i * hs + j] += (1.0 + md(5, j)) * y.get2(i, j);
            }
        }
        out
    }

    #[test]
    fn matches_straight_line_reimplementation() {
        for mode in ConditioningMode::ALL {
            let (spec, w, x, g, text) = setup(mode);
            let got = block_forward(&spec, &w, 2, &x, &g, text.as_ref(), None).unwrap();
            let want = reference_block(&spec, &w.blocks[2], &x, &g, text.as_ref());
            assert!(got.out.rel_err(&want).unwrap() < 1e-12, "{mode:?}");
        }
    }

    #[test]
    fn rowwise_phases_are_row_independent() {
        let (_, w, x, g, _) = setup(ConditioningMode::AdalnZero);
        let bw = &w.blocks[0];
        let m = modulation(bw, &g).unwrap();
        let full = ffn_residual(&modulated_norm1(&x, bw, &m).unwrap(), bw, &m).unwrap();
        let part = ffn_residual(&modulated_norm1(&x.slice_rows(3..7), bw, &m).unwrap(), bw, &m).unwrap();
        assert!(part.bit_eq(&full.slice_rows(3..7)));
    }
}
