//! Communication and memory cost per diffusion step.
//!
//! Two levels are provided. [`comm_cost`] and [`memory_cost`] give the
//! simplified per-method forms with the `(n−1)/n` factors rounded to one.
//! [`step_traffic`] and [`memory_footprint`] give the exact per-device
//! figures of the collectives the engines issue, which must agree with the
//! simulator's byte counters.

mod planner;

use std::collections::BTreeMap;

use serde::Serialize;

pub use planner::{
    enumerate_plans, predict_latency, rank_plans, Axis, CostReport, PlanCandidate, PlanOptions, Placement,
};

use crate::error::{Error, Result};
use crate::model::{param_count, ConditioningMode, DiTSpec};
use crate::simnet::{bytes, Bytes};
use crate::strategies::{ParallelConfig, Strategy};

/// Sizes entering the per-method cost forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ModelDims {
    /// Sequence length `p` seen by self-attention.
    pub seq_len: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    /// Parameter count (elements).
    pub params: usize,
    pub element_size: usize,
}

impl ModelDims {
    pub fn from_spec(spec: &DiTSpec, element_size: usize) -> Self {
        Self {
            seq_len: spec.seq_len(),
            hidden_size: spec.hidden_size,
            num_layers: spec.num_layers,
            params: param_count(spec),
            element_size,
        }
    }

    fn activation(&self) -> Bytes {
        bytes((self.seq_len * self.hidden_size * self.element_size) as u64)
    }

    /// Keys plus values of one block over the whole sequence.
    pub fn kv_bytes(&self) -> Bytes {
        self.activation() * Bytes::from_integer(2)
    }

    pub fn param_bytes(&self) -> Bytes {
        bytes((self.params * self.element_size) as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommCost {
    #[serde(serialize_with = "ser_bytes")]
    pub bytes: Bytes,
    pub overlap: bool,
}

pub(crate) fn ser_bytes<S: serde::Serializer>(b: &Bytes, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(crate::simnet::bytes_to_f64(b))
}

fn ratio(n: usize) -> Bytes {
    Bytes::from_integer(n as u128)
}

fn no_table_entry(strategy: Strategy) -> Error {
    Error::Infeasible(format!("no single-method cost form for {strategy}"))
}

/// Simplified per-step communication volume of a single method on `n` devices.
pub fn comm_cost(strategy: Strategy, dims: &ModelDims, n: usize) -> Result<CommCost> {
    if n == 0 {
        return Err(Error::Infeasible("device count must be positive".into()));
    }
    let a = dims.activation();
    let l = ratio(dims.num_layers);
    let (volume, overlap) = match strategy {
        Strategy::Serial => (bytes(0), false),
        Strategy::TensorParallel => (ratio(4) * a * l, false),
        Strategy::DistriFusion => (ratio(2) * a * l, true),
        Strategy::SpRing => (ratio(2) * a * l, true),
        Strategy::SpUlysses => (ratio(4) / ratio(n) * a * l, false),
        Strategy::PipeFusion => (ratio(2) * a, true),
        other => return Err(no_table_entry(other)),
    };
    Ok(CommCost {
        bytes: if n == 1 { bytes(0) } else { volume },
        overlap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemoryCost {
    #[serde(serialize_with = "ser_bytes")]
    pub param_bytes: Bytes,
    #[serde(serialize_with = "ser_bytes")]
    pub kv_bytes: Bytes,
}

/// Simplified per-device parameter and K/V memory of a single method.
pub fn memory_cost(strategy: Strategy, dims: &ModelDims, n: usize) -> Result<MemoryCost> {
    if n == 0 {
        return Err(Error::Infeasible("device count must be positive".into()));
    }
    let p = dims.param_bytes();
    let kv = dims.kv_bytes();
    let l = ratio(dims.num_layers);
    let n = ratio(n);
    let (param_bytes, kv_bytes) = match strategy {
        Strategy::Serial => (p, kv),
        Strategy::TensorParallel => (p / n, kv / n),
        Strategy::DistriFusion => (p, kv * l),
        Strategy::SpRing | Strategy::SpUlysses => (p, kv / n),
        Strategy::PipeFusion => (p / n, kv * l / n),
        other => return Err(no_table_entry(other)),
    };
    Ok(MemoryCost { param_bytes, kv_bytes })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficKind {
    AllReduce,
    AllGather,
    AllToAll,
    RingP2p,
    PipelineP2p,
    SkipP2p,
}

impl TrafficKind {
    pub const ALL: [TrafficKind; 6] = [
        TrafficKind::AllReduce,
        TrafficKind::AllGather,
        TrafficKind::AllToAll,
        TrafficKind::RingP2p,
        TrafficKind::PipelineP2p,
        TrafficKind::SkipP2p,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrafficKind::AllReduce => "all_reduce",
            TrafficKind::AllGather => "all_gather",
            TrafficKind::AllToAll => "all_to_all",
            TrafficKind::RingP2p => "ring_p2p",
            TrafficKind::PipelineP2p => "pipeline_p2p",
            TrafficKind::SkipP2p => "skip_p2p",
        }
    }
}

/// Exact egress per device for one diffusion step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTraffic {
    pub per_device: Vec<BTreeMap<TrafficKind, Bytes>>,
}

impl StepTraffic {
    pub fn device_totals(&self) -> Vec<Bytes> {
        self.per_device
            .iter()
            .map(|m| m.values().cloned().fold(bytes(0), |a, b| a + b))
            .collect()
    }

    pub fn max_device(&self) -> usize {
        let totals = self.device_totals();
        (0..totals.len()).max_by_key(|&i| (totals[i], std::cmp::Reverse(i))).unwrap_or(0)
    }

    pub fn max_bytes(&self) -> Bytes {
        self.device_totals().into_iter().max().unwrap_or_else(|| bytes(0))
    }

    /// Breakdown of the busiest device.
    pub fn busiest(&self) -> BTreeMap<TrafficKind, Bytes> {
        self.per_device.get(self.max_device()).cloned().unwrap_or_default()
    }
}

/// Skip sources on `stage` whose consumer lives on another stage.
pub(crate) fn cross_stage_skips(spec: &DiTSpec, pipefusion: usize, stage: usize) -> usize {
    let lps = spec.num_layers / pipefusion;
    (stage * lps..(stage + 1) * lps)
        .filter(|&b| spec.is_skip_source(b) && (spec.num_layers - 1 - b) / lps != stage)
        .count()
}

/// Per-device bytes sent in one step by the engine running `config`.
///
/// `branches` is 2 under classifier-free guidance, else 1.
pub fn step_traffic(config: &ParallelConfig, spec: &DiTSpec, branches: usize, element_size: usize) -> StepTraffic {
    let e = ratio(element_size);
    let s = ratio(spec.seq_len());
    let hs = ratio(spec.hidden_size);
    let l = ratio(spec.num_layers);
    let latent = ratio(spec.image_tokens * spec.latent_channels);
    let one = |kind: TrafficKind, b: Bytes| -> BTreeMap<TrafficKind, Bytes> {
        let mut m = BTreeMap::new();
        if b != bytes(0) {
            m.insert(kind, b);
        }
        m
    };
    match config.strategy {
        Strategy::TensorParallel => {
            let n = config.tensor_degree;
            let b = ratio(branches) * l * ratio(2) * ratio(2 * (n - 1)) / ratio(n) * s * hs * e;
            StepTraffic {
                per_device: vec![one(TrafficKind::AllReduce, b); n],
            }
        }
        Strategy::DistriFusion => {
            let n = config.distrifusion_degree;
            let b = ratio(branches) * l * ratio(n - 1) / ratio(n) * s * ratio(2) * hs * e;
            StepTraffic {
                per_device: vec![one(TrafficKind::AllGather, b); n],
            }
        }
        _ => {
            let (cfg, pp, u, r) = (
                config.cfg_degree,
                config.pipefusion_degree,
                config.ulysses_degree,
                config.ring_degree,
            );
            let sp = ratio(u * r);
            let per_half = ratio(if cfg == 2 { 1 } else { branches });
            let lps = ratio(spec.num_layers / pp);
            let shard_act = s / sp * hs * e;
            let mut per_device = Vec::with_capacity(cfg * pp * u * r);
            for _c in 0..cfg {
                for stage in 0..pp {
                    let mut m: BTreeMap<TrafficKind, Bytes> = BTreeMap::new();
                    let mut add = |k: TrafficKind, b: Bytes| {
                        if b != bytes(0) {
                            *m.entry(k).or_insert_with(|| bytes(0)) += b;
                        }
                    };
                    if u > 1 {
                        add(TrafficKind::AllToAll, per_half * ratio(4) * shard_act * lps);
                    }
                    if r > 1 {
                        add(
                            TrafficKind::RingP2p,
                            per_half * ratio(2 * (r - 1)) * (s / ratio(r)) * (hs / ratio(u)) * e * lps,
                        );
                    }
                    if stage + 1 < pp {
                        add(TrafficKind::PipelineP2p, per_half * shard_act);
                    }
                    if stage + 1 == pp && pp > 1 {
                        add(TrafficKind::PipelineP2p, latent / sp * e);
                    }
                    add(
                        TrafficKind::SkipP2p,
                        per_half * ratio(cross_stage_skips(spec, pp, stage)) * shard_act,
                    );
                    if stage + 1 == pp && cfg == 2 {
                        add(TrafficKind::AllGather, latent / sp * e);
                    }
                    for _ in 0..u * r {
                        per_device.push(m.clone());
                    }
                }
            }
            StepTraffic { per_device }
        }
    }
}

/// Parameters of one block (elements).
pub(crate) fn block_params(spec: &DiTSpec, block: usize) -> usize {
    let hs = spec.hidden_size;
    let f = spec.ffn_hidden();
    let lin = |i: usize, o: usize| i * o + o;
    let mut n = lin(hs, 6 * hs) + 2 * hs + 4 * lin(hs, hs) + 2 * hs + lin(hs, f) + lin(f, hs);
    if spec.conditioning == ConditioningMode::CrossAttention {
        n += 2 * hs + 4 * lin(hs, hs);
    }
    if spec.skip_source(block).is_some() {
        n += lin(hs, hs);
    }
    n
}

/// Elements of the tensor-parallel shards of one block (on one device, before division).
fn block_tp_sharded(spec: &DiTSpec) -> usize {
    let hs = spec.hidden_size;
    let f = spec.ffn_hidden();
    3 * (hs * hs + hs) + hs * hs + (hs * f + f) + f * hs
}

/// Exact per-device resident memory of the engine running `config`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryFootprint {
    pub params_per_device: Vec<usize>,
    pub kv_bytes_per_device: Vec<u64>,
}

pub fn memory_footprint(config: &ParallelConfig, spec: &DiTSpec, branches: usize, element_size: usize) -> MemoryFootprint {
    let hs = spec.hidden_size;
    let c = spec.latent_channels;
    let embed = c * hs + hs;
    let unembed = hs * c + c;
    let total = param_count(spec);
    let s = spec.seq_len();
    let e = element_size as u64;
    match config.strategy {
        Strategy::TensorParallel => {
            let n = config.tensor_degree;
            let sharded = block_tp_sharded(spec) * spec.num_layers;
            MemoryFootprint {
                params_per_device: vec![total - sharded + sharded / n; n],
                kv_bytes_per_device: vec![0; n],
            }
        }
        Strategy::DistriFusion => {
            let n = config.distrifusion_degree;
            let kv = (branches * spec.num_layers * 2 * s * hs) as u64 * e;
            MemoryFootprint {
                params_per_device: vec![total; n],
                kv_bytes_per_device: vec![kv; n],
            }
        }
        _ => {
            let (cfg, pp, u, r) = (
                config.cfg_degree,
                config.pipefusion_degree,
                config.ulysses_degree,
                config.ring_degree,
            );
            let lps = spec.num_layers / pp;
            let per_half = if cfg == 2 { 1 } else { branches };
            let kv = if config.num_patches > 1 {
                (per_half * lps * 2 * s * (hs / u)) as u64 * e
            } else {
                0
            };
            let mut params = Vec::new();
            for _ in 0..cfg {
                for stage in 0..pp {
                    let mut n: usize = (stage * lps..(stage + 1) * lps).map(|b| block_params(spec, b)).sum();
                    if stage == 0 {
                        n += embed;
                    }
                    if stage + 1 == pp {
                        n += unembed;
                    }
                    params.extend(std::iter::repeat_n(n, u * r));
                }
            }
            let devices = params.len();
            MemoryFootprint {
                params_per_device: params,
                kv_bytes_per_device: vec![kv; devices],
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BlockTopology;

    fn desk() -> DiTSpec {
        DiTSpec::desk(ConditioningMode::CrossAttention, BlockTopology::USkip)
    }

    #[test]
    fn block_params_sum_to_model() {
        for mode in ConditioningMode::ALL {
            for topo in [BlockTopology::Linear, BlockTopology::USkip] {
                let spec = DiTSpec::desk(mode, topo);
                let c = spec.latent_channels;
                let hs = spec.hidden_size;
                let blocks: usize = (0..spec.num_layers).map(|b| block_params(&spec, b)).sum();
                assert_eq!(blocks + 2 * c * hs + hs + c, param_count(&spec));
            }
        }
    }

    #[test]
    fn nominal_forms() {
        let d = ModelDims::from_spec(&desk(), 8);
        let a = bytes((64 * 32 * 8) as u64);
        assert_eq!(comm_cost(Strategy::TensorParallel, &d, 4).unwrap().bytes, a * ratio(16));
        assert_eq!(comm_cost(Strategy::SpUlysses, &d, 4).unwrap().bytes, a * ratio(4));
        assert_eq!(comm_cost(Strategy::PipeFusion, &d, 4).unwrap().bytes, a * ratio(2));
        assert!(comm_cost(Strategy::SpRing, &d, 2).unwrap().overlap);
        assert!(!comm_cost(Strategy::SpUlysses, &d, 2).unwrap().overlap);
        for s in [Strategy::TensorParallel, Strategy::SpRing, Strategy::DistriFusion] {
            assert_eq!(comm_cost(s, &d, 1).unwrap().bytes, bytes(0));
        }
        assert!(comm_cost(Strategy::Hybrid, &d, 2).is_err());
        let m = memory_cost(Strategy::PipeFusion, &d, 4).unwrap();
        assert_eq!(m.param_bytes, d.param_bytes() / ratio(4));
        assert_eq!(m.kv_bytes, d.kv_bytes());
    }

    #[test]
    fn tp_bytes_hand_count() {
        let spec = desk();
        let t = step_traffic(&ParallelConfig::tensor_parallel(2), &spec, 1, 8);
        // 2 all-reduces per block, factor 2·(1/2), payload 64·32·8
        assert_eq!(t.max_bytes(), bytes(4 * 2 * 64 * 32 * 8));
    }
}
