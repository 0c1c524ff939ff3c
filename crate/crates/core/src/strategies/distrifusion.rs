//! Patch data parallelism with stale remote K/V.
//!
//! Device `d` holds the whole model and computes patch `d` only. Every
//! device keeps a full-sequence K/V buffer per block. Synchronous steps
//! exchange fresh K/V with a blocking all-gather before attention. In
//! pipelined steps a device attends to its own fresh K/V plus whatever the
//! previous step's asynchronous all-gather delivered for the other patches,
//! then starts a new all-gather that is only consumed one step later.

use std::collections::HashMap;

use crate::error::Result;
use crate::flops;
use crate::model::{
    adaln_vector, attention_heads, attn_residual, cfg_combine, cross_attention, cross_kv, cross_text, embed_tokens,
    ffn_residual, head_scale, modulated_norm1, modulation, qkv, scheduler_update, skip_merge, timestep_vector,
    unembed_rows, Conditioning, DiTSpec, DiffusionSpec, LatentState, Weights,
};
use crate::simnet::{GatherHandle, SimNet, Topology};
use crate::tensor::Tensor;

use super::kvbuffer::KvBuffer;
use super::layout::{PatchPlan, Unit};
use super::staleness::FreshnessTable;
use super::{KvCheckSummary, ParallelConfig, RunOptions, RunOutput};

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_df(
    config: &ParallelConfig,
    spec: &DiTSpec,
    sched: &DiffusionSpec,
    weights: &Weights,
    x_t: &Tensor,
    cond: &Conditioning,
    topology: &Topology,
    opts: &RunOptions,
) -> Result<RunOutput> {
    let n = config.distrifusion_degree;
    let plan = PatchPlan::new(spec.context_tokens(), spec.image_tokens, n, 1)?;
    let mut net = SimNet::new(topology.clone(), n, opts.element_size)?;
    let group: Vec<usize> = (0..n).collect();
    let seq = plan.seq_len();
    let ctx = plan.context();
    let hs = spec.hidden_size;
    let hd = spec.head_dim();
    let scale = head_scale(spec);
    let mut branches = vec![cond.clone()];
    if sched.guidance_scale.is_some() {
        branches.push(cond.null_like());
    }
    let rows: Vec<Vec<usize>> = (0..n).map(|d| plan.unit_rows(Unit::Patch(d))).collect();
    let latent: Vec<Vec<usize>> = (0..n).map(|d| plan.unit_latent_rows(Unit::Patch(d))).collect();

    let mut x: Vec<Tensor> = vec![x_t.clone(); n];
    let mut buffers: HashMap<(usize, usize, usize), KvBuffer> = HashMap::new();
    let mut pending: HashMap<(usize, usize), (usize, GatherHandle)> = HashMap::new();
    let mut text_kv: HashMap<(usize, usize, usize), (Tensor, Tensor)> = HashMap::new();
    let mut freshness = FreshnessTable::default();

    let assemble = |x: &[Tensor]| -> Result<Tensor> {
        let mut full = x[0].clone();
        for d in 1..n {
            full.scatter_rows(&latent[d], &x[d].gather_rows(&latent[d]))?;
        }
        Ok(full)
    };
    let mut trace = vec![LatentState {
        x: assemble(&x)?,
        t: sched.num_steps,
    }];

    for t in sched.steps() {
        let sync = config.is_warmup(t, sched.num_steps);
        let mut eps_b: Vec<Vec<Tensor>> = Vec::with_capacity(branches.len());
        for (b, c) in branches.iter().enumerate() {
            let g = timestep_vector(spec, t, adaln_vector(c))?;
            let mut h: Vec<Tensor> = Vec::with_capacity(n);
            for d in 0..n {
                let emb = embed_tokens(&x[d].gather_rows(&latent[d]), weights)?;
                net.compute(d, flops::embed(spec, latent[d].len()));
                h.push(match c {
                    Conditioning::InContext(text) if d == 0 => Tensor::concat_rows(&[text, &emb])?,
                    _ => emb,
                });
            }
            let mut saved: HashMap<(usize, usize), Tensor> = HashMap::new();
            for (l, bw) in weights.blocks.iter().enumerate() {
                if let Some(src) = spec.skip_source(l) {
                    let sw = bw.skip.as_ref().expect("skip weights");
                    for d in 0..n {
                        net.compute(d, flops::skip(spec, h[d].rows()));
                        h[d] = skip_merge(&h[d], &saved.remove(&(d, src)).expect("skip source"), sw)?;
                    }
                }
                let m = modulation(bw, &g)?;
                let mut fresh = Vec::with_capacity(n);
                for d in 0..n {
                    net.compute(d, flops::modulation(spec) + flops::qkv(spec, h[d].rows()));
                    fresh.push(qkv(&modulated_norm1(&h[d], bw, &m)?, bw)?);
                }
                if sync {
                    let packed: Vec<Tensor> = fresh
                        .iter()
                        .map(|f| Tensor::concat_cols(&[&f.k, &f.v]))
                        .collect::<std::result::Result<_, _>>()?;
                    let parts = net.all_gather(&group, packed)?;
                    for d in 0..n {
                        let buf = buffers.entry((d, b, l)).or_insert_with(|| KvBuffer::new(seq, hs));
                        for (src, part) in parts.iter().enumerate() {
                            buf.write(&rows[src], &part.slice_cols(0..hs), &part.slice_cols(hs..2 * hs), t)?;
                        }
                    }
                } else if let Some((stamp, handle)) = pending.remove(&(b, l)) {
                    for d in 0..n {
                        net.wait(d, &handle);
                        let buf = buffers.get_mut(&(d, b, l)).expect("buffer filled in warmup");
                        for (src, part) in handle.parts.iter().enumerate() {
                            if src != d {
                                buf.write(&rows[src], &part.slice_cols(0..hs), &part.slice_cols(hs..2 * hs), stamp)?;
                            }
                        }
                    }
                }
                let mut out = Vec::with_capacity(n);
                for d in 0..n {
                    let buf = buffers.get_mut(&(d, b, l)).expect("buffer filled in warmup");
                    if !sync {
                        buf.write(&rows[d], &fresh[d].k, &fresh[d].v, t)?;
                    }
                    if b == 0 && (!sync || d == 0) {
                        let micro = if sync { 0 } else { d };
                        for j in 0..n {
                            let (lo, _) = buf.stamp_range(&rows[j]).expect("buffer rows written");
                            freshness.insert((t, micro, l, j), lo);
                        }
                    }
                    let o = attention_heads(&fresh[d].q, &buf.k, &buf.v, hd, scale)?;
                    let r = h[d].rows();
                    let mut x1 = attn_residual(&h[d], &o, bw, &m)?;
                    let mut f = flops::attention(r, seq, hs) + flops::out_proj(spec, r) + flops::ffn(spec, r);
                    if let Some(cw) = &bw.cross {
                        if !text_kv.contains_key(&(d, b, l)) {
                            let text = cross_text(c).expect("cross-attention text");
                            text_kv.insert((d, b, l), cross_kv(cw, text)?);
                            f += flops::cross_kv(spec);
                        }
                        let (tk, tv) = &text_kv[&(d, b, l)];
                        x1 = cross_attention(spec, &x1, cw, tk, tv)?;
                        f += flops::cross(spec, r);
                    }
                    net.compute(d, f);
                    let y = ffn_residual(&x1, bw, &m)?;
                    if spec.is_skip_source(l) {
                        saved.insert((d, l), y.clone());
                    }
                    out.push(y);
                }
                if !sync {
                    let packed: Vec<Tensor> = fresh
                        .iter()
                        .map(|f| Tensor::concat_cols(&[&f.k, &f.v]))
                        .collect::<std::result::Result<_, _>>()?;
                    pending.insert((b, l), (t, net.all_gather_async(&group, packed)?));
                }
                h = out;
            }
            let mut eps = Vec::with_capacity(n);
            for d in 0..n {
                let n_text = rows[d].iter().filter(|&&r| r < ctx).count();
                let img = h[d].slice_rows(n_text..h[d].rows());
                net.compute(d, flops::unembed(spec, img.rows()));
                eps.push(unembed_rows(&img, weights)?);
            }
            eps_b.push(eps);
        }
        for d in 0..n {
            let e = match sched.guidance_scale {
                Some(g) => cfg_combine(&eps_b[0][d], &eps_b[1][d], g)?,
                None => eps_b[0][d].clone(),
            };
            let upd = scheduler_update(&x[d].gather_rows(&latent[d]), &e, t, sched)?;
            x[d].scatter_rows(&latent[d], &upd)?;
        }
        trace.push(LatentState {
            x: assemble(&x)?,
            t: t - 1,
        });
    }

    let mut kv_bytes = vec![0u64; n];
    for ((d, _, _), buf) in &buffers {
        kv_bytes[*d] += buf.bytes(opts.element_size);
    }
    Ok(RunOutput {
        trace,
        report: net.elapsed_report(),
        log: net.log().to_vec(),
        freshness,
        kv: KvCheckSummary::default(),
        params_per_device: vec![weights.param_count(); n],
        kv_bytes_per_device: kv_bytes,
    })
}
