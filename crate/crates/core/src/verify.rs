//! Oracle suites: every strategy checked against serial execution, the
//! staleness replay, the analytical byte counts and the serial decoder.

use serde::Serialize;

use crate::cost::{comm_cost, memory_cost, memory_footprint, step_traffic, ModelDims};
use crate::model::{BlockTopology, ConditioningMode, DiTSpec, DiffusionSpec, Trace};
use crate::rng::SeededRng;
use crate::simnet::{bytes, Topology};
use crate::strategies::{
    divergence, max_rel_err, run_strategy, staleness_oracle, KvCheck, KvMode, ParallelConfig, Problem, RunOptions,
    StaleStrategy, Strategy,
};
use crate::tensor::conv2d;
use crate::vae::{chunked_conv, patch_parallel_decode, peak_memory_estimate, serial_decode_instrumented, DecodeOptions, VaeSpec, VaeWeights};

/// Devices the suites need from a topology.
pub const REQUIRED_DEVICES: usize = 8;
const STEPS: usize = 8;
const EXACT_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub topology: Topology,
    /// Run the hybrid consistency check with shard-only K/V buffers.
    pub naive_sp: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            topology: Topology::nvlink_node(REQUIRED_DEVICES),
            naive_sp: false,
        }
    }
}

type Check = std::result::Result<String, String>;

fn outcome(name: &'static str, r: Check) -> CheckOutcome {
    match r {
        Ok(detail) => CheckOutcome { name, passed: true, detail },
        Err(detail) => CheckOutcome { name, passed: false, detail },
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn bit_identical(a: &Trace, b: &Trace) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.t == y.t && x.x.bit_eq(&y.x))
}

/// Desk problems over every conditioning mode and block topology.
pub fn desk_problems(seed: u64, guidance: Option<f64>) -> Vec<Problem> {
    let mut v = Vec::new();
    for (i, mode) in ConditioningMode::ALL.into_iter().enumerate() {
        for (j, topo) in [BlockTopology::Linear, BlockTopology::USkip].into_iter().enumerate() {
            let mut sched = DiffusionSpec::linear(STEPS);
            sched.guidance_scale = guidance;
            let p = Problem::seeded(DiTSpec::desk(mode, topo), sched, seed.wrapping_add((10 * i + j) as u64))
                .expect("desk spec is valid");
            v.push(p);
        }
    }
    v
}

pub fn exact_strategies(opts: &VerifyOptions) -> Check {
    let mut worst = 0.0_f64;
    let mut runs = 0;
    let exact = [
        ParallelConfig::tensor_parallel(2),
        ParallelConfig::tensor_parallel(4),
        ParallelConfig::ulysses(2),
        ParallelConfig::ulysses(4),
        ParallelConfig::ring(2),
        ParallelConfig::ring(4),
        ParallelConfig::usp(2, 2),
    ];
    let cfg = [
        ParallelConfig::cfg_parallel(ParallelConfig::serial()),
        ParallelConfig::cfg_parallel(ParallelConfig::ulysses(2)),
        ParallelConfig::cfg_parallel(ParallelConfig::ring(2)),
        ParallelConfig::cfg_parallel(ParallelConfig::usp(2, 2)),
    ];
    for (guidance, configs) in [(None, &exact[..]), (Some(4.5), &cfg[..])] {
        for p in desk_problems(opts.seed, guidance) {
            let serial = p.serial().map_err(err)?;
            for c in configs {
                let out = run_strategy(&p, c, &opts.topology, &RunOptions::default()).map_err(err)?;
                let e = max_rel_err(&out.trace, &serial).map_err(err)?;
                ensure(e <= EXACT_TOL, || {
                    format!("{} on {}: max rel err {e:e}", c.label(), p.spec.conditioning.name())
                })?;
                worst = worst.max(e);
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} runs, worst max rel err {worst:e}"))
}

pub fn degenerate_and_warmup(opts: &VerifyOptions) -> Check {
    let mut runs = 0;
    for p in desk_problems(opts.seed, None) {
        let serial = p.serial().map_err(err)?;
        for c in [
            ParallelConfig::serial(),
            ParallelConfig::tensor_parallel(1),
            ParallelConfig::ulysses(1),
            ParallelConfig::ring(1),
            ParallelConfig::usp(1, 1),
            ParallelConfig::pipefusion(1, 1, 0),
            ParallelConfig::distrifusion(1, 1),
            ParallelConfig::hybrid(1, 1, 1, 1, 1, 0),
        ] {
            let out = run_strategy(&p, &c, &opts.topology, &RunOptions::default()).map_err(err)?;
            ensure(bit_identical(&out.trace, &serial), || format!("{} differs from serial", c.label()))?;
            runs += 1;
        }
        for (n, m) in [(2, 2), (2, 4), (4, 4), (4, 8)] {
            for c in [ParallelConfig::pipefusion(n, m, STEPS), ParallelConfig::distrifusion(n, STEPS)] {
                let out = run_strategy(&p, &c, &opts.topology, &RunOptions::default()).map_err(err)?;
                ensure(bit_identical(&out.trace, &serial), || {
                    format!("{} with full warmup differs from serial", c.label())
                })?;
                runs += 1;
            }
        }
    }
    Ok(format!("{runs} runs bit-identical"))
}

pub fn staleness_conformance(opts: &VerifyOptions) -> Check {
    let spec = DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::USkip);
    let p = Problem::seeded(spec.clone(), DiffusionSpec::linear(STEPS), opts.seed).map_err(err)?;
    let layers = spec.num_layers;
    let cases = [
        (StaleStrategy::PipeFusion, ParallelConfig::pipefusion(4, 4, 1), 4),
        (StaleStrategy::PipeFusion, ParallelConfig::pipefusion(2, 8, 2), 8),
        (StaleStrategy::DistriFusion, ParallelConfig::distrifusion(4, 1), 4),
    ];
    let mut entries = 0;
    for (kind, c, m) in cases {
        let n = c.pipefusion_degree.max(c.distrifusion_degree);
        let out = run_strategy(&p, &c, &opts.topology, &RunOptions::default()).map_err(err)?;
        let oracle = staleness_oracle(kind, n, m, layers, STEPS, c.warmup_steps).map_err(err)?;
        ensure(out.freshness == oracle, || format!("{} stamps differ from the replay", c.label()))?;
        entries += oracle.len();
        for t in (1..=STEPS - c.warmup_steps).rev() {
            for b in 0..layers {
                let counts: Vec<usize> = (0..oracle.micro_steps(t))
                    .map(|micro| oracle.fresh_patches(t, micro, b).len())
                    .collect();
                match kind {
                    StaleStrategy::PipeFusion => ensure(counts == (1..=m).collect::<Vec<_>>(), || {
                        format!("{}: fresh area at step {t} block {b} is {counts:?}", c.label())
                    })?,
                    StaleStrategy::DistriFusion => ensure(counts.iter().all(|&k| k == 1), || {
                        format!("{}: fresh patches at step {t} block {b} are {counts:?}", c.label())
                    })?,
                }
            }
        }
    }
    Ok(format!("{entries} stamps match"))
}

pub fn hybrid_correctness(opts: &VerifyOptions) -> Check {
    let mut worst = 0.0_f64;
    for mode in ConditioningMode::ALL {
        let mut sched = DiffusionSpec::linear(STEPS);
        sched.guidance_scale = Some(2.0);
        let p = Problem::seeded(DiTSpec::desk(mode, BlockTopology::USkip), sched, opts.seed).map_err(err)?;
        for (hybrid, pure) in [
            (ParallelConfig::hybrid(1, 4, 2, 1, 4, 1), ParallelConfig::pipefusion(4, 4, 1)),
            (ParallelConfig::hybrid(2, 2, 1, 2, 4, 1), ParallelConfig::pipefusion(2, 4, 1)),
        ] {
            let a = run_strategy(&p, &hybrid, &opts.topology, &RunOptions::default()).map_err(err)?;
            let b = run_strategy(&p, &pure, &opts.topology, &RunOptions::default()).map_err(err)?;
            let e = max_rel_err(&a.trace, &b.trace).map_err(err)?;
            ensure(e <= EXACT_TOL, || format!("{} vs {}: {e:e}", hybrid.label(), pure.label()))?;
            worst = worst.max(e);
        }
    }
    Ok(format!("worst max rel err vs pipefusion {worst:e}"))
}

/// SP-group K/V buffers agree after every pipelined attention. With
/// `naive_sp` the buffers keep only their own shard and this fails.
pub fn kv_consistency(opts: &VerifyOptions) -> Check {
    let p = Problem::seeded(
        DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::Linear),
        DiffusionSpec::linear(STEPS),
        opts.seed,
    )
    .map_err(err)?;
    let run = RunOptions {
        kv_mode: if opts.naive_sp { KvMode::NaiveSp } else { KvMode::Consistent },
        kv_check: KvCheck::Assert,
        ..RunOptions::default()
    };
    let mut checks = 0;
    for c in [ParallelConfig::hybrid(1, 4, 2, 1, 4, 1), ParallelConfig::hybrid(1, 2, 1, 2, 4, 1)] {
        let out = run_strategy(&p, &c, &opts.topology, &run).map_err(err)?;
        ensure(out.kv.checks > 0 && out.kv.violations == 0, || {
            format!("{}: {} of {} checks violated", c.label(), out.kv.violations, out.kv.checks)
        })?;
        checks += out.kv.checks;
    }
    if !opts.naive_sp {
        let ablation = RunOptions {
            kv_mode: KvMode::NaiveSp,
            kv_check: KvCheck::Report,
            ..RunOptions::default()
        };
        let out = run_strategy(&p, &ParallelConfig::hybrid(1, 4, 2, 1, 4, 1), &opts.topology, &ablation).map_err(err)?;
        ensure(out.kv.violations > 0, || "shard-only buffers went undetected".into())?;
    }
    Ok(format!("{checks} consistency checks clean"))
}

pub fn cost_fidelity(opts: &VerifyOptions) -> Check {
    let configs = [
        ParallelConfig::serial(),
        ParallelConfig::tensor_parallel(2),
        ParallelConfig::tensor_parallel(4),
        ParallelConfig::ulysses(2),
        ParallelConfig::ulysses(4),
        ParallelConfig::ring(2),
        ParallelConfig::ring(4),
        ParallelConfig::usp(2, 2),
        ParallelConfig::cfg_parallel(ParallelConfig::usp(2, 2)),
        ParallelConfig::pipefusion(4, 4, 1),
        ParallelConfig::distrifusion(4, 1),
        ParallelConfig::hybrid(2, 2, 1, 2, 4, 1),
    ];
    let mut compared = 0;
    for p in desk_problems(opts.seed, Some(3.0)) {
        let branches = p.sched.branches();
        for c in &configs {
            let out = run_strategy(&p, c, &opts.topology, &RunOptions::default()).map_err(err)?;
            let predicted = step_traffic(c, &p.spec, branches, 8).device_totals();
            for (d, got) in out.report.device_bytes.iter().enumerate() {
                let want = predicted.get(d).copied().unwrap_or(bytes(0)) * bytes(p.sched.num_steps as u64);
                ensure(want == *got, || format!("{} device {d}: predicted {want}, simulated {got}", c.label()))?;
                compared += 1;
            }
            let mem = memory_footprint(c, &p.spec, branches, 8);
            ensure(mem.params_per_device == out.params_per_device, || format!("{} parameter split", c.label()))?;
            ensure(mem.kv_bytes_per_device == out.kv_bytes_per_device, || format!("{} buffer bytes", c.label()))?;
        }
    }
    let dims = ModelDims::from_spec(&DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::Linear), 8);
    let l = dims.num_layers;
    for n in 2..2 * l {
        let pf = comm_cost(Strategy::PipeFusion, &dims, n).map_err(err)?.bytes;
        let ring = comm_cost(Strategy::SpRing, &dims, n).map_err(err)?.bytes;
        ensure(pf < ring, || format!("pipefusion bytes not below ring at N={n}"))?;
    }
    for n in [2, 4, 8] {
        let a = comm_cost(Strategy::SpUlysses, &dims, 2 * n).map_err(err)?.bytes;
        let b = comm_cost(Strategy::SpUlysses, &dims, n).map_err(err)?.bytes;
        ensure(a * bytes(2) == b, || format!("ulysses bytes do not halve from N={n}"))?;
        let df = memory_cost(Strategy::DistriFusion, &dims, n).map_err(err)?;
        let df1 = memory_cost(Strategy::DistriFusion, &dims, 1).map_err(err)?;
        ensure(df.kv_bytes == df1.kv_bytes, || format!("distrifusion buffer memory varies at N={n}"))?;
        let pf = memory_cost(Strategy::PipeFusion, &dims, n).map_err(err)?;
        let pf1 = memory_cost(Strategy::PipeFusion, &dims, 1).map_err(err)?;
        ensure(pf.kv_bytes * bytes(n as u64) == pf1.kv_bytes, || format!("pipefusion buffer memory at N={n}"))?;
        ensure(pf.param_bytes * bytes(n as u64) == dims.param_bytes(), || format!("pipefusion params at N={n}"))?;
    }
    Ok(format!("{compared} device byte counters match"))
}

pub fn vae_decode(opts: &VerifyOptions) -> Check {
    let spec = VaeSpec::desk(4);
    let mut rng = SeededRng::new(opts.seed);
    let weights = VaeWeights::init(&spec, &mut rng);
    let latent = rng.normal_tensor(&[4, 8, 8]);
    let (serial, _) = serial_decode_instrumented(&spec, &weights, &latent, 8).map_err(err)?;
    let mut worst = 0.0_f64;
    let mut last_est = u64::MAX;
    for n in [1, 2, 4] {
        let out = patch_parallel_decode(&spec, &weights, &latent, n, &opts.topology, &DecodeOptions::default())
            .map_err(err)?;
        let d = out.image.max_abs_diff(&serial).map_err(err)?;
        ensure(d <= 1e-12, || format!("N={n} decode differs by {d:e}"))?;
        worst = worst.max(d);
        let est = peak_memory_estimate(&spec, 8, 8, n, 8 << spec.stages(), 8).map_err(err)?.total;
        let measured = out.peak_bytes.iter().copied().max().unwrap_or(0);
        ensure(est >= measured, || format!("N={n}: estimate {est} below measured {measured}"))?;
        ensure(est <= last_est, || format!("estimate grows at N={n}"))?;
        last_est = est;
    }
    let x = rng.normal_tensor(&[3, 9, 7]);
    let k = rng.normal_tensor(&[5, 3, 3, 3]);
    let full = conv2d(&x, &k).map_err(err)?;
    for rows in [1, 2, 4, 9] {
        let c = chunked_conv(&x, &k, rows).map_err(err)?;
        ensure(c.output.bit_eq(&full), || format!("chunked conv with {rows} rows differs"))?;
    }
    Ok(format!("worst decode diff {worst:e}"))
}

pub fn divergence_report(opts: &VerifyOptions) -> Check {
    let p = Problem::seeded(
        DiTSpec::desk(ConditioningMode::InContext, BlockTopology::Linear),
        DiffusionSpec::linear(STEPS),
        opts.seed,
    )
    .map_err(err)?;
    let serial = p.serial().map_err(err)?;
    let warmup = 1;
    let out = run_strategy(&p, &ParallelConfig::pipefusion(4, 4, warmup), &opts.topology, &RunOptions::default())
        .map_err(err)?;
    let rows = divergence(&out.trace, &serial).map_err(err)?;
    ensure(rows.iter().all(|r| r.max_abs.is_finite() && r.rel_l2.is_finite()), || "non-finite divergence".into())?;
    ensure(rows.iter().take(warmup + 1).all(|r| r.max_abs == 0.0), || "warmup steps diverge".into())?;
    let last = rows.last().map(|r| r.rel_l2).unwrap_or(0.0);
    ensure(last > 0.0, || "stale attention left no trace".into())?;
    Ok(format!("final rel l2 {last:e}"))
}

type Suite = fn(&VerifyOptions) -> Check;

pub const SUITES: [(&str, Suite); 8] = [
    ("exact_strategies", exact_strategies),
    ("degenerate_and_warmup", degenerate_and_warmup),
    ("staleness_conformance", staleness_conformance),
    ("hybrid_correctness", hybrid_correctness),
    ("kv_consistency", kv_consistency),
    ("cost_fidelity", cost_fidelity),
    ("vae_decode", vae_decode),
    ("divergence_report", divergence_report),
];

pub fn run_all(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    SUITES.iter().map(|(name, f)| outcome(name, f(opts))).collect()
}
