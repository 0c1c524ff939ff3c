//! Parallel execution strategies over the simulated mesh.
//!
//! Three engines cover every strategy: the mesh engine (CFG × pipeline ×
//! ring × Ulysses, with patch pipelining), tensor parallelism, and
//! DistriFusion-style patch data parallelism. [`run_strategy`] validates a
//! [`ParallelConfig`] and dispatches.

mod divergence;
mod distrifusion;
mod kvbuffer;
mod layout;
mod mesh;
mod staleness;
mod tensor_parallel;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use divergence::{divergence, max_rel_err, DivergenceRow};
pub use kvbuffer::KvBuffer;
pub use layout::{PatchPlan, Unit};
pub use staleness::{staleness_oracle, FreshKey, FreshnessTable, StaleStrategy};

use crate::error::{Error, Result};
use crate::model::{serial_diffusion, Conditioning, DiTSpec, DiffusionSpec, Trace, Weights};
use crate::rng::SeededRng;
use crate::simnet::{bytes, Bytes, ElapsedReport, LogEntry, Topology};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Serial,
    TensorParallel,
    SpUlysses,
    SpRing,
    Usp,
    #[serde(rename = "distrifusion")]
    DistriFusion,
    #[serde(rename = "pipefusion")]
    PipeFusion,
    CfgParallel,
    Hybrid,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Serial,
        Strategy::TensorParallel,
        Strategy::SpUlysses,
        Strategy::SpRing,
        Strategy::Usp,
        Strategy::DistriFusion,
        Strategy::PipeFusion,
        Strategy::CfgParallel,
        Strategy::Hybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Serial => "serial",
            Strategy::TensorParallel => "tensor_parallel",
            Strategy::SpUlysses => "sp_ulysses",
            Strategy::SpRing => "sp_ring",
            Strategy::Usp => "usp",
            Strategy::DistriFusion => "distrifusion",
            Strategy::PipeFusion => "pipefusion",
            Strategy::CfgParallel => "cfg_parallel",
            Strategy::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == norm || (norm == "tp" && *k == Strategy::TensorParallel))
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

fn one() -> usize {
    1
}

/// Degrees of every parallel axis plus the patch schedule.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub strategy: Strategy,
    #[serde(default = "one")]
    pub cfg_degree: usize,
    #[serde(default = "one")]
    pub pipefusion_degree: usize,
    #[serde(default = "one")]
    pub ulysses_degree: usize,
    #[serde(default = "one")]
    pub ring_degree: usize,
    #[serde(default = "one")]
    pub tensor_degree: usize,
    #[serde(default = "one")]
    pub distrifusion_degree: usize,
    #[serde(default = "one")]
    pub num_patches: usize,
    #[serde(default)]
    pub warmup_steps: usize,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        Self::serial()
    }
}

impl ParallelConfig {
    pub fn serial() -> Self {
        Self {
            strategy: Strategy::Serial,
            cfg_degree: 1,
            pipefusion_degree: 1,
            ulysses_degree: 1,
            ring_degree: 1,
            tensor_degree: 1,
            distrifusion_degree: 1,
            num_patches: 1,
            warmup_steps: 0,
        }
    }

    pub fn tensor_parallel(n: usize) -> Self {
        Self {
            strategy: Strategy::TensorParallel,
            tensor_degree: n,
            ..Self::serial()
        }
    }

    pub fn ulysses(n: usize) -> Self {
        Self {
            strategy: Strategy::SpUlysses,
            ulysses_degree: n,
            ..Self::serial()
        }
    }

    pub fn ring(n: usize) -> Self {
        Self {
            strategy: Strategy::SpRing,
            ring_degree: n,
            ..Self::serial()
        }
    }

    pub fn usp(ulysses: usize, ring: usize) -> Self {
        Self {
            strategy: Strategy::Usp,
            ulysses_degree: ulysses,
            ring_degree: ring,
            ..Self::serial()
        }
    }

    pub fn pipefusion(n: usize, patches: usize, warmup: usize) -> Self {
        Self {
            strategy: Strategy::PipeFusion,
            pipefusion_degree: n,
            num_patches: patches,
            warmup_steps: warmup,
            ..Self::serial()
        }
    }

    pub fn distrifusion(n: usize, warmup: usize) -> Self {
        Self {
            strategy: Strategy::DistriFusion,
            distrifusion_degree: n,
            num_patches: n,
            warmup_steps: warmup,
            ..Self::serial()
        }
    }

    /// CFG parallelism around an exact sequence-parallel (or serial) inner config.
    pub fn cfg_parallel(inner: ParallelConfig) -> Self {
        Self {
            strategy: Strategy::CfgParallel,
            cfg_degree: 2,
            ..inner
        }
    }

    pub fn hybrid(cfg: usize, pipefusion: usize, ulysses: usize, ring: usize, patches: usize, warmup: usize) -> Self {
        Self {
            strategy: Strategy::Hybrid,
            cfg_degree: cfg,
            pipefusion_degree: pipefusion,
            ulysses_degree: ulysses,
            ring_degree: ring,
            num_patches: patches,
            warmup_steps: warmup,
            ..Self::serial()
        }
    }

    /// Mesh config with the most specific strategy label for its degrees.
    pub fn mesh(cfg: usize, pipefusion: usize, ulysses: usize, ring: usize, patches: usize, warmup: usize) -> Self {
        let strategy = match (cfg, pipefusion, ulysses, ring, patches) {
            (1, 1, 1, 1, 1) => Strategy::Serial,
            (1, 1, _, 1, 1) => Strategy::SpUlysses,
            (1, 1, 1, _, 1) => Strategy::SpRing,
            (1, 1, _, _, 1) => Strategy::Usp,
            (1, _, 1, 1, _) => Strategy::PipeFusion,
            (_, 1, _, _, 1) => Strategy::CfgParallel,
            _ => Strategy::Hybrid,
        };
        Self {
            strategy,
            ..Self::hybrid(cfg, pipefusion, ulysses, ring, patches, warmup)
        }
    }

    pub fn sp_degree(&self) -> usize {
        self.ulysses_degree * self.ring_degree
    }

    pub fn num_devices(&self) -> usize {
        self.cfg_degree
            * self.pipefusion_degree
            * self.ulysses_degree
            * self.ring_degree
            * self.tensor_degree
            * self.distrifusion_degree
    }

    /// Whether step `t` (counting down from `num_steps`) runs synchronously.
    pub fn is_warmup(&self, t: usize, num_steps: usize) -> bool {
        t + self.warmup_steps > num_steps
    }

    /// Short human label, e.g. `cfg2_pp2_u1_r2_m4_w1`.
    pub fn label(&self) -> String {
        match self.strategy {
            Strategy::TensorParallel => format!("tp{}", self.tensor_degree),
            Strategy::DistriFusion => format!("df{}_w{}", self.distrifusion_degree, self.warmup_steps),
            _ => format!(
                "cfg{}_pp{}_u{}_r{}_m{}_w{}",
                self.cfg_degree,
                self.pipefusion_degree,
                self.ulysses_degree,
                self.ring_degree,
                self.num_patches,
                self.warmup_steps
            ),
        }
    }

    fn uses_mesh(&self) -> bool {
        !matches!(self.strategy, Strategy::TensorParallel | Strategy::DistriFusion)
    }

    /// Checks the config against the model and schedule it will run.
    pub fn validate(&self, spec: &DiTSpec, sched: &DiffusionSpec) -> Result<()> {
        let bad = |msg: String| Err(Error::Infeasible(msg));
        let degrees = [
            ("cfg", self.cfg_degree),
            ("pipefusion", self.pipefusion_degree),
            ("ulysses", self.ulysses_degree),
            ("ring", self.ring_degree),
            ("tensor", self.tensor_degree),
            ("distrifusion", self.distrifusion_degree),
            ("num_patches", self.num_patches),
        ];
        if let Some((name, _)) = degrees.iter().find(|(_, d)| *d == 0) {
            return bad(format!("{name} degree must be positive"));
        }
        if self.cfg_degree > 2 {
            return bad(format!("cfg degree {} not in {{1, 2}}", self.cfg_degree));
        }
        if self.warmup_steps > sched.num_steps {
            return bad(format!("warmup {} exceeds {} steps", self.warmup_steps, sched.num_steps));
        }
        if self.cfg_degree == 2 && sched.guidance_scale.is_none() {
            return bad("cfg degree 2 needs a guidance scale".into());
        }
        let free = |allowed: &[&str]| -> Result<()> {
            for (name, d) in degrees {
                if d != 1 && !allowed.contains(&name) {
                    return Err(Error::Infeasible(format!(
                        "strategy {} does not use a {name} degree (got {d})",
                        self.strategy
                    )));
                }
            }
            Ok(())
        };
        match self.strategy {
            Strategy::Serial => free(&[])?,
            Strategy::TensorParallel => free(&["tensor"])?,
            Strategy::SpUlysses => free(&["ulysses"])?,
            Strategy::SpRing => free(&["ring"])?,
            Strategy::Usp => free(&["ulysses", "ring"])?,
            Strategy::PipeFusion => free(&["pipefusion", "num_patches"])?,
            Strategy::CfgParallel => free(&["cfg", "ulysses", "ring"])?,
            Strategy::DistriFusion => free(&["distrifusion", "num_patches"])?,
            Strategy::Hybrid => free(&["cfg", "pipefusion", "ulysses", "ring", "num_patches"])?,
        }
        match self.strategy {
            Strategy::TensorParallel => {
                let n = self.tensor_degree;
                if spec.num_heads % n != 0 {
                    return bad(format!("{} heads not divisible by tensor degree {n}", spec.num_heads));
                }
                if spec.ffn_hidden() % n != 0 {
                    return bad(format!("ffn width {} not divisible by tensor degree {n}", spec.ffn_hidden()));
                }
            }
            Strategy::DistriFusion => {
                let n = self.distrifusion_degree;
                if self.num_patches != n {
                    return bad(format!("{} patches for {n} devices; one patch per device", self.num_patches));
                }
                if self.warmup_steps == 0 && sched.num_steps > 0 {
                    return bad("stale K/V needs at least one warmup step".into());
                }
                PatchPlan::new(spec.context_tokens(), spec.image_tokens, n, 1)?;
            }
            _ => {
                if spec.num_heads % self.ulysses_degree != 0 {
                    return bad(format!(
                        "{} heads not divisible by ulysses degree {}",
                        spec.num_heads, self.ulysses_degree
                    ));
                }
                if spec.num_layers % self.pipefusion_degree != 0 {
                    return bad(format!(
                        "{} layers not divisible into {} stages",
                        spec.num_layers, self.pipefusion_degree
                    ));
                }
                if self.num_patches < self.pipefusion_degree {
                    return bad(format!(
                        "{} patches fewer than {} stages",
                        self.num_patches, self.pipefusion_degree
                    ));
                }
                if self.num_patches > 1 && self.warmup_steps == 0 && sched.num_steps > 0 {
                    return bad("pipelined patches need at least one warmup step".into());
                }
                PatchPlan::new(spec.context_tokens(), spec.image_tokens, self.num_patches, self.sp_degree())?;
            }
        }
        Ok(())
    }
}

/// How devices fill their K/V buffers in pipelined steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    /// Keep every K/V row seen during the SP exchange.
    #[default]
    Consistent,
    /// Ablation: keep only the rows of the device's own sequence shard.
    NaiveSp,
}

/// What to do with the SP-group K/V consistency check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvCheck {
    /// Fail the run at the first inconsistency.
    #[default]
    Assert,
    /// Count inconsistencies and keep going.
    Report,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub kv_mode: KvMode,
    pub kv_check: KvCheck,
    /// Bytes per element used for communication and memory accounting.
    pub element_size: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            kv_mode: KvMode::Consistent,
            kv_check: KvCheck::Assert,
            element_size: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct KvCheckSummary {
    pub checks: usize,
    pub violations: usize,
    pub max_abs: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub report: ElapsedReport,
    pub log: Vec<LogEntry>,
    /// Stamps of the K/V read at every attention, from one observer device.
    pub freshness: FreshnessTable,
    pub kv: KvCheckSummary,
    /// Parameters (elements) resident on each device.
    pub params_per_device: Vec<usize>,
    /// K/V buffer bytes on each device at the end of the run.
    pub kv_bytes_per_device: Vec<u64>,
}

impl RunOutput {
    /// Heaviest per-device egress divided by the number of steps.
    pub fn per_step_bytes(&self) -> Bytes {
        let steps = self.trace.len().saturating_sub(1) as u128;
        if steps == 0 {
            return bytes(0);
        }
        self.report.max_device_bytes() / Bytes::from_integer(steps)
    }

    pub fn final_latent(&self) -> &Tensor {
        &self.trace.last().expect("trace holds x_T").x
    }
}

/// Model, schedule, weights and inputs of one denoising run.
#[derive(Debug, Clone)]
pub struct Problem {
    pub spec: DiTSpec,
    pub sched: DiffusionSpec,
    pub weights: Weights,
    pub x_t: Tensor,
    pub cond: Conditioning,
}

impl Problem {
    /// Weights, then the initial latent, then the conditioning, all from `seed`.
    pub fn seeded(spec: DiTSpec, sched: DiffusionSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        sched.validate()?;
        let mut rng = SeededRng::new(seed);
        let weights = Weights::init(&spec, &mut rng);
        let x_t = rng.normal_tensor(&[spec.image_tokens, spec.latent_channels]);
        let cond = Conditioning::random(&spec, &mut rng);
        Ok(Self {
            spec,
            sched,
            weights,
            x_t,
            cond,
        })
    }

    pub fn serial(&self) -> Result<Trace> {
        serial_diffusion(&self.spec, &self.sched, &self.weights, &self.x_t, &self.cond)
    }
}

/// Validates `config` and runs it on the first devices of `topology`.
pub fn run_strategy(
    problem: &Problem,
    config: &ParallelConfig,
    topology: &Topology,
    opts: &RunOptions,
) -> Result<RunOutput> {
    let Problem {
        spec,
        sched,
        weights,
        x_t,
        cond,
    } = problem;
    spec.validate()?;
    sched.validate()?;
    cond.check(spec)?;
    config.validate(spec, sched)?;
    if x_t.shape() != [spec.image_tokens, spec.latent_channels] {
        return Err(Error::InvalidSpec(format!(
            "latent shape {:?}, expected [{}, {}]",
            x_t.shape(),
            spec.image_tokens,
            spec.latent_channels
        )));
    }
    if config.num_devices() > topology.num_devices() {
        return Err(Error::Infeasible(format!(
            "{} devices requested, topology has {}",
            config.num_devices(),
            topology.num_devices()
        )));
    }
    if config.uses_mesh() {
        mesh::run_mesh(config, spec, sched, weights, x_t, cond, topology, opts)
    } else if config.strategy == Strategy::TensorParallel {
        tensor_parallel::run_tp(config.tensor_degree, spec, sched, weights, x_t, cond, topology, opts)
    } else {
        distrifusion::run_df(config, spec, sched, weights, x_t, cond, topology, opts)
    }
}

pub fn run_tensor_parallel(problem: &Problem, n: usize, topology: &Topology) -> Result<RunOutput> {
    run_strategy(problem, &ParallelConfig::tensor_parallel(n), topology, &RunOptions::default())
}

pub fn run_sp_ulysses(problem: &Problem, n: usize, topology: &Topology) -> Result<RunOutput> {
    run_strategy(problem, &ParallelConfig::ulysses(n), topology, &RunOptions::default())
}

pub fn run_sp_ring(problem: &Problem, n: usize, topology: &Topology) -> Result<RunOutput> {
    run_strategy(problem, &ParallelConfig::ring(n), topology, &RunOptions::default())
}

pub fn run_usp(problem: &Problem, ulysses: usize, ring: usize, topology: &Topology) -> Result<RunOutput> {
    run_strategy(problem, &ParallelConfig::usp(ulysses, ring), topology, &RunOptions::default())
}

pub fn run_pipefusion(
    problem: &Problem,
    n: usize,
    patches: usize,
    warmup: usize,
    topology: &Topology,
) -> Result<RunOutput> {
    run_strategy(problem, &ParallelConfig::pipefusion(n, patches, warmup), topology, &RunOptions::default())
}

pub fn run_distrifusion(problem: &Problem, n: usize, warmup: usize, topology: &Topology) -> Result<RunOutput> {
    run_strategy(problem, &ParallelConfig::distrifusion(n, warmup), topology, &RunOptions::default())
}

/// `inner` must be serial, Ulysses, Ring or USP.
pub fn run_cfg_parallel(problem: &Problem, inner: ParallelConfig, topology: &Topology) -> Result<RunOutput> {
    if !matches!(
        inner.strategy,
        Strategy::Serial | Strategy::SpUlysses | Strategy::SpRing | Strategy::Usp
    ) {
        return Err(Error::Infeasible(format!("cfg parallel around {} is not supported", inner.strategy)));
    }
    run_strategy(problem, &ParallelConfig::cfg_parallel(inner), topology, &RunOptions::default())
}

pub fn run_hybrid(problem: &Problem, config: &ParallelConfig, topology: &Topology, opts: &RunOptions) -> Result<RunOutput> {
    let config = ParallelConfig {
        strategy: Strategy::Hybrid,
        ..config.clone()
    };
    run_strategy(problem, &config, topology, opts)
}
