//! Mesh engine: CFG × pipeline stages × ring × Ulysses, with patch pipelining.
//!
//! Device `((c·PP + s)·R + r)·U + u` is CFG half `c`, stage `s`, ring slot
//! `r`, Ulysses rank `u`; its SP shard index is `q = r·U + u`.
//!
//! Program order per diffusion step: for each unit (the whole sequence in
//! synchronous steps, one patch per micro-step otherwise), for each branch,
//! for each stage, for each owned block. Stage hand-offs and the noise
//! prediction returned to stage 0 travel as overlappable p2p messages;
//! skip tensors crossing stages are blocking p2p. With more than one patch
//! every SP device keeps a K/V buffer over all sequence rows for its head
//! group, refreshed from the rows it receives during the Ulysses exchange
//! and ring rotation.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::flops;
use crate::model::{
    adaln_vector, attention_heads, attn_residual, cfg_combine, cross_attention, cross_kv, cross_text, embed_tokens,
    ffn_residual, head_scale, modulated_norm1, modulation, qkv, scheduler_update, skip_merge, timestep_vector,
    unembed_rows, Conditioning, DiTSpec, DiffusionSpec, LatentState, Modulation, Qkv, Weights,
};
use crate::simnet::{SimNet, Topology};
use crate::tensor::{streaming_attention_merge, SoftmaxAccumulator, Tensor};

use super::kvbuffer::KvBuffer;
use super::layout::{PatchPlan, Unit};
use super::staleness::FreshnessTable;
use super::{KvCheck, KvCheckSummary, KvMode, ParallelConfig, RunOptions, RunOutput};

#[derive(Debug, Clone, Copy)]
struct Dims {
    cfg: usize,
    pp: usize,
    ring: usize,
    uly: usize,
    patches: usize,
}

impl Dims {
    fn sp(&self) -> usize {
        self.ring * self.uly
    }

    fn dev(&self, c: usize, s: usize, q: usize) -> usize {
        (c * self.pp + s) * self.sp() + q
    }

    fn total(&self) -> usize {
        self.cfg * self.pp * self.sp()
    }
}

struct Engine<'a> {
    spec: &'a DiTSpec,
    sched: &'a DiffusionSpec,
    weights: &'a Weights,
    opts: &'a RunOptions,
    d: Dims,
    warmup: usize,
    plan: PatchPlan,
    net: SimNet,
    branches: Vec<Conditioning>,
    x: HashMap<usize, Tensor>,
    buffers: HashMap<(usize, usize, usize), KvBuffer>,
    text_kv: HashMap<(usize, usize, usize), (Tensor, Tensor)>,
    saved: HashMap<(usize, usize, usize), Tensor>,
    freshness: FreshnessTable,
    kv: KvCheckSummary,
    /// Predictions in flight back to stage 0, waited on when their unit is next embedded.
    pending_eps: HashMap<usize, Vec<(Unit, usize, String)>>,
}

/// Where a block runs on the current unit.
#[derive(Clone, Copy)]
struct At {
    t: usize,
    micro: usize,
    unit: Unit,
    branch: usize,
    half: usize,
    stage: usize,
}

fn tag(kind: &str, at: &At, extra: usize) -> String {
    format!("{kind}/{}/{}/{}/{extra}", at.branch, at.t, at.micro)
}

impl<'a> Engine<'a> {
    fn layers_per_stage(&self) -> usize {
        self.spec.num_layers / self.d.pp
    }

    fn stage_of(&self, block: usize) -> usize {
        block / self.layers_per_stage()
    }

    fn buffered(&self) -> bool {
        self.d.patches > 1
    }

    fn half_of(&self, branch: usize) -> usize {
        if self.d.cfg == 2 {
            branch
        } else {
            0
        }
    }

    fn params_per_device(&self) -> Vec<usize> {
        let mut out = vec![0; self.d.total()];
        let lps = self.layers_per_stage();
        for c in 0..self.d.cfg {
            for s in 0..self.d.pp {
                let mut n: usize = (s * lps..(s + 1) * lps)
                    .map(|b| self.weights.blocks[b].param_count())
                    .sum();
                if s == 0 {
                    n += self.weights.embed_param_count();
                }
                if s + 1 == self.d.pp {
                    n += self.weights.unembed_param_count();
                }
                for q in 0..self.d.sp() {
                    out[self.d.dev(c, s, q)] = n;
                }
            }
        }
        out
    }

    fn embed_shard(&mut self, at: &At, q: usize) -> Result<Tensor> {
        let rows = self.plan.shard_rows(at.unit, q);
        let ctx = self.plan.context();
        let dev = self.d.dev(at.half, 0, q);
        let latent: Vec<usize> = rows.iter().filter(|&&r| r >= ctx).map(|&r| r - ctx).collect();
        let x_img = self.x[&dev].gather_rows(&latent);
        self.net.compute(dev, flops::embed(self.spec, latent.len()));
        let emb = embed_tokens(&x_img, self.weights)?;
        match &self.branches[at.branch] {
            Conditioning::InContext(text) => {
                let trows: Vec<usize> = rows.iter().copied().filter(|&r| r < ctx).collect();
                Ok(Tensor::concat_rows(&[&text.gather_rows(&trows), &emb])?)
            }
            _ => Ok(emb),
        }
    }

    fn run(mut self) -> Result<RunOutput> {
        let t_total = self.sched.num_steps;
        let mut trace = vec![LatentState {
            x: self.assemble_x(),
            t: t_total,
        }];
        let nb = self.branches.len();
        for t in self.sched.steps() {
            let sync = t + self.warmup > t_total || !self.buffered();
            let units: Vec<Unit> = if sync {
                vec![Unit::Whole]
            } else {
                (0..self.d.patches).map(Unit::Patch).collect()
            };
            let gs: Vec<Tensor> = self
                .branches
                .iter()
                .map(|c| timestep_vector(self.spec, t, adaln_vector(c)))
                .collect::<Result<_>>()?;
            for (micro, &unit) in units.iter().enumerate() {
                let mut eps: Vec<Vec<Tensor>> = Vec::with_capacity(nb);
                for b in 0..nb {
                    let mut at = At {
                        t,
                        micro,
                        unit,
                        branch: b,
                        half: self.half_of(b),
                        stage: 0,
                    };
                    let mut h: Vec<Tensor> = Vec::with_capacity(self.d.sp());
                    for s in 0..self.d.pp {
                        at.stage = s;
                        if s == 0 {
                            for q in 0..self.d.sp() {
                                self.await_eps(self.d.dev(at.half, 0, q), Some(unit))?;
                            }
                            h = (0..self.d.sp()).map(|q| self.embed_shard(&at, q)).collect::<Result<_>>()?;
                        } else {
                            h = (0..self.d.sp())
                                .map(|q| {
                                    let (from, to) = (self.d.dev(at.half, s - 1, q), self.d.dev(at.half, s, q));
                                    self.net.recv(to, from, &tag("act", &at, s))
                                })
                                .collect::<Result<_>>()?;
                        }
                        let lps = self.layers_per_stage();
                        for block in s * lps..(s + 1) * lps {
                            h = self.block(block, &at, &gs[b], h)?;
                        }
                        if s + 1 < self.d.pp {
                            for (q, hq) in h.iter().enumerate() {
                                let (from, to) = (self.d.dev(at.half, s, q), self.d.dev(at.half, s + 1, q));
                                self.net.send(from, to, &tag("act", &at, s + 1), hq.clone(), true)?;
                            }
                        }
                    }
                    let ctx = self.plan.context();
                    let mut out = Vec::with_capacity(self.d.sp());
                    for (q, hq) in h.iter().enumerate() {
                        let n_text = self.plan.shard_rows(unit, q).iter().filter(|&&r| r < ctx).count();
                        let img = hq.slice_rows(n_text..hq.rows());
                        self.net
                            .compute(self.d.dev(at.half, self.d.pp - 1, q), flops::unembed(self.spec, img.rows()));
                        out.push(unembed_rows(&img, self.weights)?);
                    }
                    eps.push(out);
                }
                self.finish_unit(t, micro, unit, eps)?;
            }
            trace.push(LatentState {
                x: self.assemble_x(),
                t: t - 1,
            });
        }
        let owners: Vec<usize> = self.pending_eps.keys().copied().collect();
        for dev in owners {
            self.await_eps(dev, None)?;
        }
        let report = self.net.elapsed_report();
        let mut kv_bytes = vec![0u64; self.d.total()];
        for ((dev, _, _), buf) in &self.buffers {
            kv_bytes[*dev] += buf.bytes(self.net.element_size());
        }
        Ok(RunOutput {
            trace,
            params_per_device: self.params_per_device(),
            kv_bytes_per_device: kv_bytes,
            log: self.net.log().to_vec(),
            report,
            freshness: self.freshness,
            kv: self.kv,
        })
    }

    /// Guidance combine, return to stage 0 and scheduler update for one unit.
    fn finish_unit(&mut self, t: usize, micro: usize, unit: Unit, eps: Vec<Vec<Tensor>>) -> Result<()> {
        let sp = self.d.sp();
        let last = self.d.pp - 1;
        let mut combined: Vec<Vec<Tensor>> = vec![Vec::with_capacity(sp); self.d.cfg];
        match self.sched.guidance_scale {
            None => combined[0] = eps.into_iter().next().expect("one branch"),
            Some(g) => {
                for q in 0..sp {
                    let e = if self.d.cfg == 2 {
                        let group = [self.d.dev(0, last, q), self.d.dev(1, last, q)];
                        let parts = self.net.all_gather(&group, vec![eps[0][q].clone(), eps[1][q].clone()])?;
                        cfg_combine(&parts[0], &parts[1], g)?
                    } else {
                        cfg_combine(&eps[0][q], &eps[1][q], g)?
                    };
                    for half in combined.iter_mut() {
                        half.push(e.clone());
                    }
                }
            }
        }
        let ctx = self.plan.context();
        for (c, per_q) in combined.into_iter().enumerate() {
            for (q, e) in per_q.into_iter().enumerate() {
                let stage0 = self.d.dev(c, 0, q);
                if self.d.pp > 1 {
                    let from = self.d.dev(c, last, q);
                    let tg = format!("eps/{t}/{micro}");
                    self.net.send(from, stage0, &tg, e.clone(), true)?;
                    self.pending_eps.entry(stage0).or_default().push((unit, from, tg));
                }
                let latent: Vec<usize> = self
                    .plan
                    .shard_rows(unit, q)
                    .into_iter()
                    .filter(|&r| r >= ctx)
                    .map(|r| r - ctx)
                    .collect();
                let x = self.x.get_mut(&stage0).expect("stage-0 latent");
                let upd = scheduler_update(&x.gather_rows(&latent), &e, t, self.sched)?;
                x.scatter_rows(&latent, &upd)?;
            }
        }
        Ok(())
    }

    /// Waits for returned predictions overlapping `unit` (all of them if `None`).
    fn await_eps(&mut self, dev: usize, unit: Option<Unit>) -> Result<()> {
        let Some(list) = self.pending_eps.remove(&dev) else {
            return Ok(());
        };
        let mut keep = Vec::new();
        for (u, from, tg) in list {
            let due = match unit {
                None | Some(Unit::Whole) => true,
                Some(cur) => u == Unit::Whole || u == cur,
            };
            if due {
                self.net.recv(dev, from, &tg)?;
            } else {
                keep.push((u, from, tg));
            }
        }
        if !keep.is_empty() {
            self.pending_eps.insert(dev, keep);
        }
        Ok(())
    }

    /// Latent assembled from the owners on CFG half 0 (instrumentation only).
    fn assemble_x(&self) -> Tensor {
        let mut full = self.x[&self.d.dev(0, 0, 0)].clone();
        for q in 1..self.d.sp() {
            let rows = self.plan.latent_rows(q);
            let part = self.x[&self.d.dev(0, 0, q)].gather_rows(&rows);
            full.scatter_rows(&rows, &part).expect("same width");
        }
        full
    }

    fn cached_text_kv(&mut self, dev: usize, at: &At, block: usize) -> Result<Option<(Tensor, Tensor)>> {
        let Some(cw) = &self.weights.blocks[block].cross else {
            return Ok(None);
        };
        let key = (dev, at.branch, block);
        if !self.text_kv.contains_key(&key) {
            let text = cross_text(&self.branches[at.branch]).expect("cross-attention text");
            self.net.compute(dev, flops::cross_kv(self.spec));
            self.text_kv.insert(key, cross_kv(cw, text)?);
        }
        Ok(self.text_kv.get(&key).cloned())
    }

    fn block(&mut self, block: usize, at: &At, g: &Tensor, mut h: Vec<Tensor>) -> Result<Vec<Tensor>> {
        let spec = self.spec;
        let d = self.d;
        let (sp, uly, ring) = (d.sp(), d.uly, d.ring);
        let devs: Vec<usize> = (0..sp).map(|q| d.dev(at.half, at.stage, q)).collect();
        let rows_q: Vec<Vec<usize>> = (0..sp).map(|q| self.plan.shard_rows(at.unit, q)).collect();
        let bw = &self.weights.blocks[block];

        if let Some(src) = spec.skip_source(block) {
            let src_stage = self.stage_of(src);
            let sw = bw.skip.as_ref().expect("skip weights");
            for q in 0..sp {
                let saved = if src_stage == at.stage {
                    self.saved.remove(&(devs[q], at.branch, src)).expect("saved skip output")
                } else {
                    let from = d.dev(at.half, src_stage, q);
                    self.net.recv(devs[q], from, &tag("skip", at, src))?
                };
                self.net.compute(devs[q], flops::skip(spec, h[q].rows()));
                h[q] = skip_merge(&h[q], &saved, sw)?;
            }
        }

        let m: Modulation = modulation(bw, g)?;
        let mut local: Vec<Qkv> = Vec::with_capacity(sp);
        for q in 0..sp {
            self.net
                .compute(devs[q], flops::modulation(spec) + flops::qkv(spec, h[q].rows()));
            local.push(qkv(&modulated_norm1(&h[q], bw, &m)?, bw)?);
        }

        // Ulysses exchange: sequence shards -> head groups within each ring slot.
        let w = spec.hidden_size / uly;
        let mut slot_q: Vec<Tensor> = Vec::with_capacity(sp);
        let mut slot_k: Vec<Tensor> = Vec::with_capacity(sp);
        let mut slot_v: Vec<Tensor> = Vec::with_capacity(sp);
        if uly > 1 {
            for r in 0..ring {
                let group: Vec<usize> = (0..uly).map(|u| devs[r * uly + u]).collect();
                let mut gathered: [Vec<Tensor>; 3] = Default::default();
                for (which, out) in gathered.iter_mut().enumerate() {
                    let send: Vec<Vec<Tensor>> = (0..uly)
                        .map(|u| {
                            let src = &local[r * uly + u];
                            let x = [&src.q, &src.k, &src.v][which];
                            (0..uly).map(|u2| x.slice_cols(u2 * w..(u2 + 1) * w)).collect()
                        })
                        .collect();
                    let recv = self.net.all_to_all(&group, send)?;
                    for parts in recv {
                        let refs: Vec<&Tensor> = parts.iter().collect();
                        out.push(Tensor::concat_rows(&refs)?);
                    }
                }
                let [gq, gk, gv] = gathered;
                slot_q.extend(gq);
                slot_k.extend(gk);
                slot_v.extend(gv);
            }
        } else {
            for l in &local {
                slot_q.push(l.q.clone());
                slot_k.push(l.k.clone());
                slot_v.push(l.v.clone());
            }
        }
        let slot_rows: Vec<Vec<usize>> = (0..ring)
            .map(|r| (0..uly).flat_map(|u| rows_q[r * uly + u].iter().copied()).collect())
            .collect();

        let naive = self.opts.kv_mode == KvMode::NaiveSp && at.unit != Unit::Whole;
        let shard_len = rows_q[0].len();
        let seq = self.plan.seq_len();
        let scale = head_scale(spec);
        let hd = spec.head_dim();
        let mut o_slot: Vec<Tensor> = Vec::with_capacity(sp);

        if ring == 1 {
            for q in 0..sp {
                let u = q;
                if self.buffered() {
                    let (wr, wk, wv) = if naive {
                        let span = u * shard_len..(u + 1) * shard_len;
                        (rows_q[q].clone(), slot_k[q].slice_rows(span.clone()), slot_v[q].slice_rows(span))
                    } else {
                        (slot_rows[0].clone(), slot_k[q].clone(), slot_v[q].clone())
                    };
                    let buf = self
                        .buffers
                        .entry((devs[q], at.branch, block))
                        .or_insert_with(|| KvBuffer::new(seq, w));
                    buf.write(&wr, &wk, &wv, at.t)?;
                    let o = attention_heads(&slot_q[q], &buf.k, &buf.v, hd, scale)?;
                    self.net.compute(devs[q], flops::attention(slot_q[q].rows(), seq, w));
                    o_slot.push(o);
                } else {
                    let mut kf = Tensor::zeros(&[seq, w]);
                    let mut vf = Tensor::zeros(&[seq, w]);
                    kf.scatter_rows(&slot_rows[0], &slot_k[q])?;
                    vf.scatter_rows(&slot_rows[0], &slot_v[q])?;
                    self.net.compute(devs[q], flops::attention(slot_q[q].rows(), seq, w));
                    o_slot.push(attention_heads(&slot_q[q], &kf, &vf, hd, scale)?);
                }
            }
        } else {
            // Ring rotation of packed [K | V] blocks within each Ulysses rank.
            let mut blocks: Vec<Vec<(usize, Tensor)>> = vec![Vec::new(); sp];
            for u in 0..uly {
                let group: Vec<usize> = (0..ring).map(|r| devs[r * uly + u]).collect();
                let mut cur: Vec<Tensor> = (0..ring)
                    .map(|r| Tensor::concat_cols(&[&slot_k[r * uly + u], &slot_v[r * uly + u]]))
                    .collect::<std::result::Result<_, _>>()?;
                for r in 0..ring {
                    blocks[r * uly + u].push((r, cur[r].clone()));
                }
                for hop in 1..ring {
                    // Attend to the held block while the next one is in flight.
                    let htag = format!("{}/{}/{hop}#0", tag("ring", at, block), u);
                    for r in 0..ring {
                        self.net.send(group[r], group[(r + 1) % ring], &htag, cur[r].clone(), true)?;
                    }
                    for r in 0..ring {
                        let q_rows = slot_q[r * uly + u].rows();
                        self.net.compute(group[r], flops::attention(q_rows, cur[r].rows(), w));
                    }
                    cur = (0..ring)
                        .map(|r| self.net.recv(group[r], group[(r + ring - 1) % ring], &htag))
                        .collect::<Result<_>>()?;
                    for r in 0..ring {
                        blocks[r * uly + u].push(((r + ring - hop) % ring, cur[r].clone()));
                    }
                }
            }
            let unit_rows = self.plan.unit_rows(at.unit);
            for q in 0..sp {
                let (r, u) = (q / uly, q % uly);
                let rest: Vec<usize> = if self.buffered() {
                    let in_unit: std::collections::HashSet<usize> = unit_rows.iter().copied().collect();
                    (0..seq).filter(|row| !in_unit.contains(row)).collect()
                } else {
                    Vec::new()
                };
                if self.buffered() {
                    let buf = self
                        .buffers
                        .entry((devs[q], at.branch, block))
                        .or_insert_with(|| KvBuffer::new(seq, w));
                    for (src_slot, packed) in &blocks[q] {
                        if naive && *src_slot != r {
                            continue;
                        }
                        let (rows, kb, vb) = if naive {
                            let span = u * shard_len..(u + 1) * shard_len;
                            (
                                rows_q[q].clone(),
                                packed.slice_cols(0..w).slice_rows(span.clone()),
                                packed.slice_cols(w..2 * w).slice_rows(span),
                            )
                        } else {
                            (slot_rows[*src_slot].clone(), packed.slice_cols(0..w), packed.slice_cols(w..2 * w))
                        };
                        buf.write(&rows, &kb, &vb, at.t)?;
                    }
                }
                let rest_kv = if rest.is_empty() {
                    None
                } else {
                    let buf = &self.buffers[&(devs[q], at.branch, block)];
                    Some((buf.k.gather_rows(&rest), buf.v.gather_rows(&rest)))
                };
                let mut heads = Vec::with_capacity(w / hd);
                for head in 0..w / hd {
                    let cols = head * hd..(head + 1) * hd;
                    let qh = slot_q[q].slice_cols(cols.clone());
                    let mut acc = SoftmaxAccumulator::new(qh.rows(), hd, scale);
                    for (_, packed) in &blocks[q] {
                        let kb = packed.slice_cols(cols.start..cols.end);
                        let vb = packed.slice_cols(w + cols.start..w + cols.end);
                        acc = streaming_attention_merge(acc, &qh, &kb, &vb)?;
                    }
                    if let Some((rk, rv)) = &rest_kv {
                        acc = streaming_attention_merge(acc, &qh, &rk.slice_cols(cols.clone()), &rv.slice_cols(cols))?;
                    }
                    heads.push(acc.finalize());
                }
                let refs: Vec<&Tensor> = heads.iter().collect();
                let tail = blocks[q].last().map_or(0, |(_, b)| b.rows()) + rest.len();
                self.net.compute(devs[q], flops::attention(slot_q[q].rows(), tail, w));
                o_slot.push(Tensor::concat_cols(&refs)?);
            }
        }

        if self.buffered() {
            self.check_and_record(block, at, &devs, &rows_q, &local)?;
        } else if at.half == 0 && at.branch == 0 {
            for j in 0..self.d.patches {
                self.freshness.insert((at.t, at.micro, block, j), at.t);
            }
        }

        // Back from head groups to sequence shards.
        let o: Vec<Tensor> = if uly > 1 {
            let mut o = vec![Tensor::zeros(&[0, 0]); sp];
            for r in 0..ring {
                let group: Vec<usize> = (0..uly).map(|u| devs[r * uly + u]).collect();
                let send: Vec<Vec<Tensor>> = (0..uly)
                    .map(|u| {
                        (0..uly)
                            .map(|u2| o_slot[r * uly + u].slice_rows(u2 * shard_len..(u2 + 1) * shard_len))
                            .collect()
                    })
                    .collect();
                let recv = self.net.all_to_all(&group, send)?;
                for (u2, parts) in recv.into_iter().enumerate() {
                    let refs: Vec<&Tensor> = parts.iter().collect();
                    o[r * uly + u2] = Tensor::concat_cols(&refs)?;
                }
            }
            o
        } else {
            o_slot
        };

        let mut out = Vec::with_capacity(sp);
        for q in 0..sp {
            let rows = h[q].rows();
            let mut x1 = attn_residual(&h[q], &o[q], bw, &m)?;
            let mut f = flops::out_proj(spec, rows) + flops::ffn(spec, rows);
            if let Some((tk, tv)) = self.cached_text_kv(devs[q], at, block)? {
                x1 = cross_attention(spec, &x1, bw.cross.as_ref().expect("cross weights"), &tk, &tv)?;
                f += flops::cross(spec, rows);
            }
            self.net.compute(devs[q], f);
            let y = ffn_residual(&x1, bw, &m)?;
            if spec.is_skip_source(block) {
                let consumer = spec.num_layers - 1 - block;
                let cs = self.stage_of(consumer);
                if cs == at.stage {
                    self.saved.insert((devs[q], at.branch, block), y.clone());
                } else {
                    let to = d.dev(at.half, cs, q);
                    self.net.send(devs[q], to, &tag("skip", at, block), y.clone(), false)?;
                }
            }
            out.push(y);
        }
        Ok(out)
    }

    /// Compares every SP device's buffer over the current unit with the
    /// K/V its owners just computed, and records buffer stamps.
    fn check_and_record(
        &mut self,
        block: usize,
        at: &At,
        devs: &[usize],
        rows_q: &[Vec<usize>],
        local: &[Qkv],
    ) -> Result<()> {
        let uly = self.d.uly;
        let w = self.spec.hidden_size / uly;
        if self.opts.kv_check != KvCheck::Off {
            let seq = self.plan.seq_len();
            let mut auth_k = Tensor::zeros(&[seq, self.spec.hidden_size]);
            let mut auth_v = Tensor::zeros(&[seq, self.spec.hidden_size]);
            for (q, l) in local.iter().enumerate() {
                auth_k.scatter_rows(&rows_q[q], &l.k)?;
                auth_v.scatter_rows(&rows_q[q], &l.v)?;
            }
            let unit_rows = self.plan.unit_rows(at.unit);
            for (q, &dev) in devs.iter().enumerate() {
                let u = q % uly;
                let cols = u * w..(u + 1) * w;
                let buf = &self.buffers[&(dev, at.branch, block)];
                let want_k = auth_k.gather_rows(&unit_rows).slice_cols(cols.clone());
                let want_v = auth_v.gather_rows(&unit_rows).slice_cols(cols);
                let dk = buf.k.gather_rows(&unit_rows).max_abs_diff(&want_k)?;
                let dv = buf.v.gather_rows(&unit_rows).max_abs_diff(&want_v)?;
                let stale = buf.stamp_range(&unit_rows) != Some((at.t, at.t));
                let dev_abs = dk.max(dv);
                self.kv.checks += 1;
                if dev_abs != 0.0 || stale || !dev_abs.is_finite() {
                    self.kv.violations += 1;
                    self.kv.max_abs = self.kv.max_abs.max(dev_abs);
                    if self.opts.kv_check == KvCheck::Assert {
                        return Err(Error::KvInconsistent {
                            step: at.t,
                            block,
                            unit: at.micro,
                            device: dev,
                            max_abs: dev_abs,
                        });
                    }
                }
            }
        }
        if at.half == 0 && at.branch == 0 {
            let buf = &self.buffers[&(devs[0], at.branch, block)];
            for j in 0..self.d.patches {
                let rows = self.plan.unit_rows(Unit::Patch(j));
                let (lo, _) = buf.stamp_range(&rows).ok_or_else(|| {
                    Error::Infeasible(format!("patch {j} of block {block} read before any write"))
                })?;
                self.freshness.insert((at.t, at.micro, block, j), lo);
            }
        }
        Ok(())
    }
}

pub(crate) fn run_mesh(
    config: &ParallelConfig,
    spec: &DiTSpec,
    sched: &DiffusionSpec,
    weights: &Weights,
    x_t: &Tensor,
    cond: &Conditioning,
    topology: &Topology,
    opts: &RunOptions,
) -> Result<RunOutput> {
    let d = Dims {
        cfg: config.cfg_degree,
        pp: config.pipefusion_degree,
        ring: config.ring_degree,
        uly: config.ulysses_degree,
        patches: config.num_patches,
    };
    let plan = PatchPlan::new(spec.context_tokens(), spec.image_tokens, d.patches, d.sp())?;
    let net = SimNet::new(topology.clone(), d.total(), opts.element_size)?;
    let mut branches = vec![cond.clone()];
    if sched.guidance_scale.is_some() {
        branches.push(cond.null_like());
    }
    let mut x = HashMap::new();
    for c in 0..d.cfg {
        for q in 0..d.sp() {
            x.insert(d.dev(c, 0, q), x_t.clone());
        }
    }
    Engine {
        spec,
        sched,
        weights,
        opts,
        d,
        warmup: config.warmup_steps,
        plan,
        net,
        branches,
        x,
        buffers: HashMap::new(),
        text_kv: HashMap::new(),
        saved: HashMap::new(),
        freshness: FreshnessTable::default(),
        kv: KvCheckSummary::default(),
        pending_eps: HashMap::new(),
    }
    .run()
}
