//! Megatron-style tensor parallelism.
//!
//! Device `d` holds head group `d` of the Q/K/V projections and slice `d`
//! of the FFN hidden layer (column shards), plus the matching row shards of
//! the output and second FFN projections. Each block ends its attention and
//! its FFN with an all-reduce of partial products; biases of the row-sharded
//! projections are added after the reduction. Everything else (modulation,
//! norms, cross-attention, skip merges, embeddings, the latent) is replicated.

use crate::error::Result;
use crate::flops;
use crate::model::{
    adaln_vector, attention_heads, cfg_combine, cross_attention, cross_kv, cross_text, embed_tokens, gated_residual,
    head_scale, modulated_norm1, modulated_norm2, modulation, scheduler_update, skip_merge, timestep_vector,
    unembed_rows, BlockWeights, Conditioning, DiTSpec, DiffusionSpec, LatentState, Weights,
};
use crate::simnet::{SimNet, Topology};
use crate::tensor::{gelu, linear, matmul, Tensor};

use super::staleness::FreshnessTable;
use super::{KvCheckSummary, RunOptions, RunOutput};

struct Shard {
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
}

impl Shard {
    fn new(bw: &BlockWeights, d: usize, n: usize) -> Self {
        let hs = bw.wq.rows();
        let f = bw.w1.cols();
        let a = d * hs / n..(d + 1) * hs / n;
        let h = d * f / n..(d + 1) * f / n;
        Self {
            wq: bw.wq.slice_cols(a.clone()),
            bq: bw.bq.slice_vec(a.clone()),
            wk: bw.wk.slice_cols(a.clone()),
            bk: bw.bk.slice_vec(a.clone()),
            wv: bw.wv.slice_cols(a.clone()),
            bv: bw.bv.slice_vec(a.clone()),
            wo: bw.wo.slice_rows(a),
            w1: bw.w1.slice_cols(h.clone()),
            b1: bw.b1.slice_vec(h.clone()),
            w2: bw.w2.slice_rows(h),
        }
    }

    fn params(&self) -> usize {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.w1, &self.b1, &self.w2,
        ]
        .iter()
        .map(|t| t.len())
        .sum()
    }
}

fn replicated_params(bw: &BlockWeights) -> usize {
    let sharded = [&bw.wq, &bw.bq, &bw.wk, &bw.bk, &bw.wv, &bw.bv, &bw.wo, &bw.w1, &bw.b1, &bw.w2];
    bw.param_count() - sharded.iter().map(|t| t.len()).sum::<usize>()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_tp(
    n: usize,
    spec: &DiTSpec,
    sched: &DiffusionSpec,
    weights: &Weights,
    x_t: &Tensor,
    cond: &Conditioning,
    topology: &Topology,
    opts: &RunOptions,
) -> Result<RunOutput> {
    let mut net = SimNet::new(topology.clone(), n, opts.element_size)?;
    let group: Vec<usize> = (0..n).collect();
    let shards: Vec<Vec<Shard>> = weights
        .blocks
        .iter()
        .map(|bw| (0..n).map(|d| Shard::new(bw, d, n)).collect())
        .collect();
    let mut branches = vec![cond.clone()];
    if sched.guidance_scale.is_some() {
        branches.push(cond.null_like());
    }
    let hd = spec.head_dim();
    let scale = head_scale(spec);
    let seq = spec.seq_len();
    let ctx = spec.context_tokens();

    let mut text_kv: Vec<Vec<Option<(Tensor, Tensor)>>> = vec![vec![None; spec.num_layers]; branches.len()];
    let mut x = x_t.clone();
    let mut trace = vec![LatentState {
        x: x.clone(),
        t: sched.num_steps,
    }];
    for t in sched.steps() {
        let mut eps_b = Vec::with_capacity(branches.len());
        for (b, c) in branches.iter().enumerate() {
            let g = timestep_vector(spec, t, adaln_vector(c))?;
            let img = embed_tokens(&x, weights)?;
            let mut h = match c {
                Conditioning::InContext(text) => Tensor::concat_rows(&[text, &img])?,
                _ => img,
            };
            for &d in &group {
                net.compute(d, flops::embed(spec, spec.image_tokens));
            }
            let mut saved: Vec<Option<Tensor>> = vec![None; spec.num_layers];
            for (l, bw) in weights.blocks.iter().enumerate() {
                if let Some(src) = spec.skip_source(l) {
                    let sw = bw.skip.as_ref().expect("skip weights");
                    h = skip_merge(&h, saved[src].as_ref().expect("skip source"), sw)?;
                    for &d in &group {
                        net.compute(d, flops::skip(spec, seq));
                    }
                }
                let m = modulation(bw, &g)?;
                let hn = modulated_norm1(&h, bw, &m)?;
                let mut partial = Vec::with_capacity(n);
                for (d, sh) in shards[l].iter().enumerate() {
                    let q = linear(&hn, &sh.wq, &sh.bq)?;
                    let k = linear(&hn, &sh.wk, &sh.bk)?;
                    let v = linear(&hn, &sh.wv, &sh.bv)?;
                    let o = attention_heads(&q, &k, &v, hd, scale)?;
                    partial.push(matmul(&o, &sh.wo)?);
                    let w = spec.hidden_size / n;
                    net.compute(
                        d,
                        flops::modulation(spec)
                            + 3.0 * flops::linear(seq, spec.hidden_size, w)
                            + flops::attention(seq, seq, w)
                            + flops::linear(seq, w, spec.hidden_size),
                    );
                }
                let o = net.all_reduce(&group, partial)?.add_row_vector(&bw.bo)?;
                let mut x1 = gated_residual(&h, &o, &m.gate1)?;
                if let Some(cw) = &bw.cross {
                    if text_kv[b][l].is_none() {
                        let text = cross_text(c).expect("cross-attention text");
                        text_kv[b][l] = Some(cross_kv(cw, text)?);
                        for &d in &group {
                            net.compute(d, flops::cross_kv(spec));
                        }
                    }
                    let (tk, tv) = text_kv[b][l].as_ref().expect("cached");
                    x1 = cross_attention(spec, &x1, cw, tk, tv)?;
                    for &d in &group {
                        net.compute(d, flops::cross(spec, seq));
                    }
                }
                let hn2 = modulated_norm2(&x1, bw, &m)?;
                let mut partial = Vec::with_capacity(n);
                for (d, sh) in shards[l].iter().enumerate() {
                    let a = gelu(&linear(&hn2, &sh.w1, &sh.b1)?);
                    partial.push(matmul(&a, &sh.w2)?);
                    net.compute(d, flops::ffn(spec, seq) / n as f64);
                }
                let y = net.all_reduce(&group, partial)?.add_row_vector(&bw.b2)?;
                h = gated_residual(&x1, &y, &m.gate2)?;
                if spec.is_skip_source(l) {
                    saved[l] = Some(h.clone());
                }
            }
            for &d in &group {
                net.compute(d, flops::unembed(spec, spec.image_tokens));
            }
            eps_b.push(unembed_rows(&h.slice_rows(ctx..seq), weights)?);
        }
        let eps = match sched.guidance_scale {
            Some(g) => cfg_combine(&eps_b[0], &eps_b[1], g)?,
            None => eps_b.pop().expect("one branch"),
        };
        x = scheduler_update(&x, &eps, t, sched)?;
        trace.push(LatentState { x: x.clone(), t: t - 1 });
    }

    let replicated: usize = weights.embed_param_count()
        + weights.unembed_param_count()
        + weights.blocks.iter().map(replicated_params).sum::<usize>();
    let params_per_device = (0..n)
        .map(|d| replicated + shards.iter().map(|s| s[d].params()).sum::<usize>())
        .collect();
    Ok(RunOutput {
        trace,
        report: net.elapsed_report(),
        log: net.log().to_vec(),
        freshness: FreshnessTable::default(),
        kv: KvCheckSummary::default(),
        params_per_device,
        kv_bytes_per_device: vec![0; n],
    })
}
