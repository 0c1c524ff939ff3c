//! Latency prediction and hybrid plan search.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::Serialize;

use super::{cross_stage_skips, memory_footprint, step_traffic, TrafficKind};
use crate::error::{Error, Result};
use crate::flops;
use crate::model::{DiTSpec, DiffusionSpec};
use crate::simnet::{bytes_to_f64, Link, Topology};
use crate::strategies::{ParallelConfig, Strategy};

/// One axis of the device mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Cfg,
    Pipe,
    Ring,
    Ulysses,
}

/// Order of the mesh axes from outermost (slowest-varying device id) to
/// innermost. The engines use the default order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Placement {
    pub order: [Axis; 4],
}

impl Default for Placement {
    fn default() -> Self {
        Self {
            order: [Axis::Cfg, Axis::Pipe, Axis::Ring, Axis::Ulysses],
        }
    }
}

impl Placement {
    pub fn all() -> Vec<Placement> {
        let axes = [Axis::Cfg, Axis::Pipe, Axis::Ring, Axis::Ulysses];
        let mut out = Vec::new();
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        let idx = [a, b, c, d];
                        let mut seen = [false; 4];
                        idx.iter().for_each(|&i| seen[i] = true);
                        if seen.iter().all(|&s| s) {
                            out.push(Placement {
                                order: idx.map(|i| axes[i]),
                            });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn label(&self) -> String {
        self.order
            .iter()
            .map(|a| match a {
                Axis::Cfg => "cfg",
                Axis::Pipe => "pp",
                Axis::Ring => "ring",
                Axis::Ulysses => "ulysses",
            })
            .collect::<Vec<_>>()
            .join(">")
    }

    fn degree(config: &ParallelConfig, axis: Axis) -> usize {
        match axis {
            Axis::Cfg => config.cfg_degree,
            Axis::Pipe => config.pipefusion_degree,
            Axis::Ring => config.ring_degree,
            Axis::Ulysses => config.ulysses_degree,
        }
    }

    fn device(&self, config: &ParallelConfig, coord: &BTreeMap<Axis, usize>) -> usize {
        self.order
            .iter()
            .fold(0, |id, &a| id * Self::degree(config, a) + coord[&a])
    }

    /// All device groups along `axis`, each in axis order.
    pub fn groups(&self, config: &ParallelConfig, axis: Axis) -> Vec<Vec<usize>> {
        let others: Vec<Axis> = self.order.iter().copied().filter(|&a| a != axis).collect();
        let dims: Vec<usize> = others.iter().map(|&a| Self::degree(config, a)).collect();
        let count: usize = dims.iter().product();
        let mut out = Vec::with_capacity(count);
        for mut flat in 0..count {
            let mut coord = BTreeMap::new();
            for (a, d) in others.iter().zip(&dims).rev() {
                coord.insert(*a, flat % d);
                flat /= d;
            }
            let group = (0..Self::degree(config, axis))
                .map(|i| {
                    coord.insert(axis, i);
                    self.device(config, &coord)
                })
                .collect();
            out.push(group);
        }
        out
    }
}

fn worst(links: impl IntoIterator<Item = Link>) -> Option<Link> {
    links.into_iter().reduce(|w, l| Link {
        kind: if l.bandwidth < w.bandwidth { l.kind } else { w.kind },
        bandwidth: w.bandwidth.min(l.bandwidth),
        latency: w.latency.max(l.latency),
    })
}

/// Bottleneck link of collectives along `axis`.
fn collective_link(topo: &Topology, config: &ParallelConfig, placement: &Placement, axis: Axis) -> Link {
    worst(placement.groups(config, axis).iter().map(|g| topo.group_link(g))).unwrap_or_else(|| topo.intra_link())
}

/// Bottleneck link between neighbours along `axis` (ring order, with wrap-around if `wrap`).
fn neighbour_link(topo: &Topology, config: &ParallelConfig, placement: &Placement, axis: Axis, wrap: bool) -> Link {
    let mut links = Vec::new();
    for g in placement.groups(config, axis) {
        let n = g.len();
        let pairs = if wrap { n } else { n.saturating_sub(1) };
        for i in 0..pairs {
            if n > 1 {
                links.push(topo.link_between(g[i], g[(i + 1) % n]));
            }
        }
    }
    worst(links).unwrap_or_else(|| topo.intra_link())
}

/// Predicted cost of one plan.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    /// Busiest device's egress per step, by traffic kind.
    pub comm_bytes: BTreeMap<TrafficKind, f64>,
    pub step_comm_bytes: f64,
    pub exposed_comm_time: f64,
    pub overlapped_comm_time: f64,
    pub compute_time: f64,
    pub param_bytes: f64,
    pub kv_bytes: f64,
    pub activation_bytes: f64,
    pub step_latency: f64,
    pub warmup_surcharge: f64,
    pub end_to_end_latency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanOptions {
    pub element_size: usize,
    /// Warmup steps given to plans with pipelined patches.
    pub warmup_steps: usize,
    pub patch_choices: Vec<usize>,
    /// Score every axis order instead of only the default.
    pub exhaustive_placement: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            element_size: 2,
            warmup_steps: 1,
            patch_choices: vec![2, 4, 8, 16, 32],
            exhaustive_placement: false,
        }
    }
}

/// Comm time of `count` messages totalling `total` bytes over `link`.
fn xfer(link: &Link, count: f64, total: f64) -> f64 {
    count * link.latency + total / link.bandwidth
}

/// Per-step latency model: compute at device throughput plus the part of
/// each transfer that is not hidden behind compute.
pub fn predict_latency(
    config: &ParallelConfig,
    placement: &Placement,
    spec: &DiTSpec,
    sched: &DiffusionSpec,
    topology: &Topology,
    element_size: usize,
) -> Result<CostReport> {
    config.validate(spec, sched)?;
    if config.num_devices() > topology.num_devices() {
        return Err(Error::Infeasible(format!(
            "{} devices requested, topology has {}",
            config.num_devices(),
            topology.num_devices()
        )));
    }
    let branches = sched.branches();
    let tput = topology.throughput();
    let e = element_size as f64;
    let s = spec.seq_len() as f64;
    let hs = spec.hidden_size as f64;
    let l = spec.num_layers as f64;
    let latent = (spec.image_tokens * spec.latent_channels) as f64;
    let forward = flops::forward(spec);
    let traffic = step_traffic(config, spec, branches, element_size);
    let mem = memory_footprint(config, spec, branches, element_size);
    let param_bytes = mem.params_per_device.iter().copied().max().unwrap_or(0) as f64 * e;
    let kv_bytes = mem.kv_bytes_per_device.iter().copied().max().unwrap_or(0) as f64;

    let (compute, exposed, overlapped, activation, warmup_surcharge) = match config.strategy {
        Strategy::TensorParallel => {
            let n = config.tensor_degree as f64;
            let compute = branches as f64 * forward / n / tput;
            let link = topology.group_link(&(0..config.tensor_degree).collect::<Vec<_>>());
            let comm = if n > 1.0 {
                let count = branches as f64 * l * 2.0;
                xfer(&link, count, count * 2.0 * (n - 1.0) / n * s * hs * e)
            } else {
                0.0
            };
            (compute, comm, 0.0, s * spec.ffn_hidden() as f64 / n * e, 0.0)
        }
        Strategy::DistriFusion => {
            let n = config.distrifusion_degree as f64;
            let compute = branches as f64 * forward / n / tput;
            let link = topology.group_link(&(0..config.distrifusion_degree).collect::<Vec<_>>());
            let comm = if n > 1.0 {
                // Asynchronous gathers share the link but not their latency.
                let count = branches as f64 * l;
                xfer(&link, 1.0, count * (n - 1.0) / n * 2.0 * s * hs * e)
            } else {
                0.0
            };
            let exposed = (comm - compute).max(0.0);
            let surcharge = config.warmup_steps as f64 * (comm - exposed);
            (compute, exposed, comm - exposed, s / n * spec.ffn_hidden() as f64 * e, surcharge)
        }
        _ => {
            let (cfg, pp, u, r) = (
                config.cfg_degree,
                config.pipefusion_degree,
                config.ulysses_degree,
                config.ring_degree,
            );
            let sp = (u * r) as f64;
            let per_half = if cfg == 2 { 1.0 } else { branches as f64 };
            let units = config.num_patches as f64;
            let lps = (spec.num_layers / pp) as f64;
            let compute = per_half * forward / (pp as f64 * sp) / tput;

            let mut exposed = 0.0;
            let mut overlapped = 0.0;
            if u > 1 {
                let link = collective_link(topology, config, placement, Axis::Ulysses);
                let count = per_half * lps * units * 4.0;
                exposed += xfer(&link, count, per_half * lps * 4.0 * s / sp * hs * e);
            }
            if r > 1 {
                // Each hop hides behind attention over the block already held.
                let link = neighbour_link(topology, config, placement, Axis::Ring, true);
                let (rf, uf) = (r as f64, u as f64);
                let block_rows = s / (rf * units);
                let hop = xfer(&link, 1.0, 2.0 * block_rows * hs / uf * e);
                let window = 4.0 * block_rows * block_rows * hs / uf / tput;
                let hops = per_half * lps * units * (rf - 1.0);
                overlapped += hops * hop.min(window);
                exposed += hops * (hop - window).max(0.0);
            }
            if pp > 1 {
                let link = neighbour_link(topology, config, placement, Axis::Pipe, true);
                let comm = xfer(&link, 1.0, per_half * s / sp * hs * e + latent / sp * e);
                let hidden = comm.min(compute);
                overlapped += hidden;
                exposed += comm - hidden;
                let skips = (0..pp).map(|st| cross_stage_skips(spec, pp, st)).max().unwrap_or(0) as f64;
                if skips > 0.0 {
                    let link = collective_link(topology, config, placement, Axis::Pipe);
                    exposed += xfer(&link, per_half * skips * units, per_half * skips * s / sp * hs * e);
                }
            }
            if cfg == 2 {
                let link = collective_link(topology, config, placement, Axis::Cfg);
                exposed += xfer(&link, units, latent / sp * e);
            }
            if pp > 1 {
                // A patch must go once around the stage ring before its next step can start.
                let link = neighbour_link(topology, config, placement, Axis::Pipe, true);
                let hop = xfer(&link, per_half, per_half * s / sp / units * hs * e);
                let round_trip = pp as f64 * (compute / pp as f64 / units + hop);
                if round_trip > compute + exposed {
                    exposed = round_trip - compute;
                }
            }
            let surcharge = if pp > 1 || config.num_patches > 1 {
                config.warmup_steps as f64 * pp as f64 * compute
            } else {
                0.0
            };
            let rows = s / sp / units;
            let activation = rows * (spec.ffn_hidden() as f64).max(3.0 * hs) * e;
            (compute, exposed, overlapped, activation, surcharge)
        }
    };
    let step_latency = compute + exposed;
    let comm_bytes = traffic
        .busiest()
        .into_iter()
        .map(|(k, b)| (k, bytes_to_f64(&b)))
        .collect();
    Ok(CostReport {
        comm_bytes,
        step_comm_bytes: bytes_to_f64(&traffic.max_bytes()),
        exposed_comm_time: exposed,
        overlapped_comm_time: overlapped,
        compute_time: compute,
        param_bytes,
        kv_bytes,
        activation_bytes: activation,
        step_latency,
        warmup_surcharge,
        end_to_end_latency: sched.num_steps as f64 * step_latency + warmup_surcharge,
    })
}

/// A scored (or rejected) configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanCandidate {
    pub config: ParallelConfig,
    pub placement: Placement,
    pub report: Option<CostReport>,
    /// Why the plan cannot run, when it cannot.
    pub violation: Option<String>,
}

impl PlanCandidate {
    pub fn is_feasible(&self) -> bool {
        self.report.is_some()
    }

    pub fn latency(&self) -> Option<f64> {
        self.report.as_ref().map(|r| r.end_to_end_latency)
    }
}

/// Every `cfg × pipefusion × ulysses × ring = n` factorization, with patch
/// counts swept on pipelined plans, scored on `topology`.
pub fn enumerate_plans(
    n: usize,
    spec: &DiTSpec,
    sched: &DiffusionSpec,
    topology: &Topology,
    opts: &PlanOptions,
) -> Vec<PlanCandidate> {
    let placements = if opts.exhaustive_placement {
        Placement::all()
    } else {
        vec![Placement::default()]
    };
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let cfgs: &[usize] = if sched.guidance_scale.is_some() { &[1, 2] } else { &[1] };
    for &cfg in cfgs {
        if n % cfg != 0 {
            continue;
        }
        let rest = n / cfg;
        for pp in (1..=rest).filter(|d| rest % d == 0) {
            let sp = rest / pp;
            for u in (1..=sp).filter(|d| sp % d == 0) {
                let r = sp / u;
                let patch_counts: Vec<usize> = if pp > 1 { opts.patch_choices.clone() } else { vec![1] };
                for &m in &patch_counts {
                    let warmup = if m > 1 { opts.warmup_steps.min(sched.num_steps) } else { 0 };
                    let config = ParallelConfig::mesh(cfg, pp, u, r, m, warmup);
                    for placement in &placements {
                        let scored = predict_latency(&config, placement, spec, sched, topology, opts.element_size);
                        out.push(match scored {
                            Ok(report) => PlanCandidate {
                                config: config.clone(),
                                placement: *placement,
                                report: Some(report),
                                violation: None,
                            },
                            Err(e) => PlanCandidate {
                                config: config.clone(),
                                placement: *placement,
                                report: None,
                                violation: Some(e.to_string()),
                            },
                        });
                    }
                }
            }
        }
    }
    out
}

fn config_key(c: &PlanCandidate) -> (usize, usize, usize, usize, usize, usize, Placement) {
    let k = &c.config;
    (
        k.cfg_degree,
        k.pipefusion_degree,
        k.ulysses_degree,
        k.ring_degree,
        k.num_patches,
        k.warmup_steps,
        c.placement,
    )
}

/// Feasible plans by predicted latency (ties broken by config), then the
/// infeasible ones.
pub fn rank_plans(candidates: Vec<PlanCandidate>) -> Result<Vec<PlanCandidate>> {
    let total = candidates.len();
    let (mut ok, mut bad): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|c| c.is_feasible());
    if ok.is_empty() {
        return Err(Error::NoFeasiblePlan(total));
    }
    ok.sort_by(|a, b| {
        let (x, y) = (a.latency().unwrap_or(f64::INFINITY), b.latency().unwrap_or(f64::INFINITY));
        x.total_cmp(&y).then_with(|| config_key(a).cmp(&config_key(b)))
    });
    bad.sort_by(|a, b| config_key(a).cmp(&config_key(b)).then(Ordering::Equal));
    ok.extend(bad);
    Ok(ok)
}
