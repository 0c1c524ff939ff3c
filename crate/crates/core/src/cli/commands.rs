use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::{Context, ParallelFlags, PlanArgs, RunArgs, SweepArgs, VerifyArgs};
use crate::config::TokenPreset;
use crate::cost::{enumerate_plans, predict_latency, rank_plans, step_traffic, Placement, PlanOptions};
use crate::error::{Error, Result};
use crate::io::{save_trace, write_json, write_table};
use crate::model::{DiTSpec, DiffusionSpec, Trace};
use crate::simnet::{bytes_to_f64, Topology};
use crate::strategies::{divergence, run_strategy, ParallelConfig, Problem, RunOptions, RunOutput, Strategy};
use crate::verify::{run_all, VerifyOptions, REQUIRED_DEVICES};

const SIM_ELEMENT_SIZE: usize = 8;

/// Builds a config from a strategy name plus degree flags. `degree` is the
/// total device count for strategies with one free axis; USP splits it into
/// the most square `ulysses × ring`, and a hybrid without explicit axes puts
/// CFG outermost (when guided) and the rest into the pipeline.
pub fn build_parallel(strategy: Strategy, degree: Option<usize>, f: &ParallelFlags, guided: bool) -> Result<ParallelConfig> {
    let n = degree.unwrap_or(1);
    let square = |n: usize| {
        let r = (1..=n).filter(|d| n % d == 0 && d * d <= n).max().unwrap_or(1);
        (n / r, r)
    };
    let pipelined = |pp: usize| {
        let m = f.patches.unwrap_or(pp);
        (m, f.warmup.unwrap_or(usize::from(m > 1)))
    };
    Ok(match strategy {
        Strategy::Serial => {
            if n != 1 {
                return Err(Error::Infeasible(format!("serial runs on one device, not {n}")));
            }
            ParallelConfig::serial()
        }
        Strategy::TensorParallel => ParallelConfig::tensor_parallel(n),
        Strategy::SpUlysses => ParallelConfig::ulysses(f.ulysses.unwrap_or(n)),
        Strategy::SpRing => ParallelConfig::ring(f.ring.unwrap_or(n)),
        Strategy::Usp => {
            let (u, r) = match (f.ulysses, f.ring) {
                (None, None) => square(n),
                (u, r) => (u.unwrap_or(1), r.unwrap_or(1)),
            };
            ParallelConfig::usp(u, r)
        }
        Strategy::PipeFusion => {
            let pp = f.pipefusion.unwrap_or(n);
            let (m, w) = pipelined(pp);
            ParallelConfig::pipefusion(pp, m, w)
        }
        Strategy::DistriFusion => ParallelConfig::distrifusion(n, f.warmup.unwrap_or(1)),
        Strategy::CfgParallel => {
            let inner_n = if degree.is_some() {
                if n % 2 != 0 {
                    return Err(Error::Infeasible(format!("cfg parallel needs an even degree, got {n}")));
                }
                n / 2
            } else {
                1
            };
            let (u, r) = match (f.ulysses, f.ring) {
                (None, None) => square(inner_n),
                (u, r) => (u.unwrap_or(1), r.unwrap_or(1)),
            };
            ParallelConfig::cfg_parallel(ParallelConfig::usp(u, r))
        }
        Strategy::Hybrid => {
            let explicit = f.cfg.is_some() || f.pipefusion.is_some() || f.ulysses.is_some() || f.ring.is_some();
            let (cfg, pp, u, r) = if explicit {
                (f.cfg.unwrap_or(1), f.pipefusion.unwrap_or(1), f.ulysses.unwrap_or(1), f.ring.unwrap_or(1))
            } else {
                let cfg = if guided && n % 2 == 0 { 2 } else { 1 };
                (cfg, n / cfg, 1, 1)
            };
            let (m, w) = if pp > 1 { pipelined(pp) } else { (f.patches.unwrap_or(1), f.warmup.unwrap_or(0)) };
            ParallelConfig::hybrid(cfg, pp, u, r, m, w)
        }
    })
}

/// One simulated configuration; shared by `run` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub strategy: Strategy,
    pub devices: usize,
    pub image_tokens: usize,
    pub cfg: usize,
    pub pipefusion: usize,
    pub ulysses: usize,
    pub ring: usize,
    pub tensor: usize,
    pub distrifusion: usize,
    pub patches: usize,
    pub warmup: usize,
    pub simulated_latency: f64,
    pub predicted_latency: Option<f64>,
    pub max_device_bytes: f64,
    pub total_bytes: f64,
    pub max_param_bytes: u64,
    pub max_kv_bytes: u64,
    pub max_abs_divergence: f64,
    pub final_rel_l2: f64,
}

impl ReportRow {
    fn new(config: &ParallelConfig, p: &Problem, topo: &Topology, out: &RunOutput, reference: &Trace) -> Result<Self> {
        let div = divergence(&out.trace, reference)?;
        let predicted = predict_latency(config, &Placement::default(), &p.spec, &p.sched, topo, SIM_ELEMENT_SIZE)
            .ok()
            .map(|r| r.end_to_end_latency);
        Ok(Self {
            label: config.label(),
            strategy: config.strategy,
            devices: config.num_devices(),
            image_tokens: p.spec.image_tokens,
            cfg: config.cfg_degree,
            pipefusion: config.pipefusion_degree,
            ulysses: config.ulysses_degree,
            ring: config.ring_degree,
            tensor: config.tensor_degree,
            distrifusion: config.distrifusion_degree,
            patches: config.num_patches,
            warmup: config.warmup_steps,
            simulated_latency: out.report.makespan(),
            predicted_latency: predicted,
            max_device_bytes: bytes_to_f64(&out.report.max_device_bytes()),
            total_bytes: bytes_to_f64(&out.report.total_bytes()),
            max_param_bytes: out.params_per_device.iter().copied().max().unwrap_or(0) as u64 * SIM_ELEMENT_SIZE as u64,
            max_kv_bytes: out.kv_bytes_per_device.iter().copied().max().unwrap_or(0),
            max_abs_divergence: div.iter().map(|r| r.max_abs).fold(0.0, f64::max),
            final_rel_l2: div.last().map(|r| r.rel_l2).unwrap_or(0.0),
        })
    }
}

fn problem_with_tokens(spec: &DiTSpec, sched: &DiffusionSpec, tokens: Option<usize>, seed: u64) -> Result<Problem> {
    let mut spec = spec.clone();
    if let Some(t) = tokens {
        spec.image_tokens = t;
    }
    Problem::seeded(spec, sched.clone(), seed)
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<bool> {
    let ctx = Context::load(&args.common, "out/verify")?;
    let topology = ctx.topology(REQUIRED_DEVICES)?;
    if topology.num_devices() < REQUIRED_DEVICES {
        return Err(Error::Config(format!(
            "verify needs {REQUIRED_DEVICES} devices, topology has {}",
            topology.num_devices()
        )));
    }
    let opts = VerifyOptions {
        seed: ctx.config.seed,
        topology,
        naive_sp: args.naive_sp,
    };
    let outcomes = run_all(&opts);
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    }
    let passed = outcomes.iter().all(|o| o.passed);
    #[derive(Serialize)]
    struct Report<'a> {
        passed: bool,
        seed: u64,
        naive_sp: bool,
        checks: &'a [crate::verify::CheckOutcome],
    }
    write_json(
        &ctx.out,
        "verify",
        &Report {
            passed,
            seed: opts.seed,
            naive_sp: opts.naive_sp,
            checks: &outcomes,
        },
    )?;
    Ok(passed)
}

#[derive(Serialize)]
struct BytesRow {
    device: usize,
    simulated_bytes: f64,
    predicted_bytes: f64,
}

#[derive(Serialize)]
struct MemoryRow {
    device: usize,
    param_bytes: u64,
    kv_bytes: u64,
}

pub fn cmd_run(args: &RunArgs) -> Result<bool> {
    let ctx = Context::load(&args.common, "out/run")?;
    let cfg = &ctx.config;
    let sched = cfg.sched();
    let config = match args.strategy {
        Some(s) => build_parallel(s, args.degree, &args.parallel, sched.guidance_scale.is_some())?,
        None => cfg.parallel.clone(),
    };
    let p = problem_with_tokens(&cfg.model, &sched, args.tokens, cfg.seed)?;
    config.validate(&p.spec, &p.sched)?;
    let topo = ctx.topology(config.num_devices())?;
    let out = run_strategy(&p, &config, &topo, &RunOptions::default())?;
    let reference = p.serial()?;
    let row = ReportRow::new(&config, &p, &topo, &out, &reference)?;

    write_table(&ctx.out, "divergence", &divergence(&out.trace, &reference)?)?;
    let steps = p.sched.num_steps as f64;
    let predicted = step_traffic(&config, &p.spec, p.sched.branches(), SIM_ELEMENT_SIZE).device_totals();
    let bytes_rows: Vec<BytesRow> = out
        .report
        .device_bytes
        .iter()
        .enumerate()
        .map(|(d, b)| BytesRow {
            device: d,
            simulated_bytes: bytes_to_f64(b),
            predicted_bytes: predicted.get(d).map(|x| bytes_to_f64(x) * steps).unwrap_or(0.0),
        })
        .collect();
    write_table(&ctx.out, "bytes", &bytes_rows)?;
    let mem_rows: Vec<MemoryRow> = (0..config.num_devices())
        .map(|d| MemoryRow {
            device: d,
            param_bytes: out.params_per_device[d] as u64 * SIM_ELEMENT_SIZE as u64,
            kv_bytes: out.kv_bytes_per_device[d],
        })
        .collect();
    write_table(&ctx.out, "memory", &mem_rows)?;
    write_table(&ctx.out, "summary", std::slice::from_ref(&row))?;
    save_trace(&ctx.out.join("trace.dtns"), &out.trace)?;
    println!(
        "{}: simulated {:.6e} s, predicted {}, max divergence {:.3e}",
        row.label,
        row.simulated_latency,
        row.predicted_latency.map_or("n/a".into(), |x| format!("{x:.6e} s")),
        row.max_abs_divergence
    );
    Ok(true)
}

#[derive(Debug, Clone, Serialize)]
struct InfeasibleRow {
    strategy: Strategy,
    degree: usize,
    patches: usize,
    image_tokens: usize,
    reason: String,
}

struct Cell {
    strategy: Strategy,
    degree: usize,
    patches: usize,
    tokens: usize,
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<bool> {
    let ctx = Context::load(&args.common, "out/sweep")?;
    let cfg = &ctx.config;
    let sched = cfg.sched();
    let tokens = if args.tokens.is_empty() { vec![cfg.model.image_tokens] } else { args.tokens.clone() };
    let mut cells = Vec::new();
    for &strategy in &args.strategy {
        for &degree in &args.degree {
            for &patches in &args.patches {
                for &t in &tokens {
                    cells.push(Cell {
                        strategy,
                        degree,
                        patches,
                        tokens: t,
                    });
                }
            }
        }
    }
    if cells.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let max_devices = args.degree.iter().copied().max().unwrap_or(1);
    let topo = ctx.topology(max_devices)?;

    let mut references: BTreeMap<usize, (Problem, Trace)> = BTreeMap::new();
    for &t in &tokens {
        match problem_with_tokens(&cfg.model, &sched, Some(t), cfg.seed) {
            Ok(p) => {
                let r = p.serial()?;
                references.insert(t, (p, r));
            }
            Err(e) => return Err(Error::Config(format!("{t} tokens: {e}"))),
        }
    }

    let results: Mutex<Vec<(usize, std::result::Result<ReportRow, String>)>> = Mutex::new(Vec::new());
    let next = AtomicUsize::new(0);
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, cells.len());
    let guided = sched.guidance_scale.is_some();
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = cells.get(i) else { break };
                let flags = ParallelFlags {
                    patches: Some(cell.patches),
                    warmup: args.warmup,
                    ..ParallelFlags::default()
                };
                let (p, reference) = &references[&cell.tokens];
                let r = build_parallel(cell.strategy, Some(cell.degree), &flags, guided)
                    .and_then(|c| {
                        let out = run_strategy(p, &c, &topo, &RunOptions::default())?;
                        ReportRow::new(&c, p, &topo, &out, reference)
                    })
                    .map_err(|e| e.to_string());
                results.lock().expect("no poisoned workers").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("workers joined");
    results.sort_by_key(|(i, _)| *i);
    let mut rows = Vec::new();
    let mut infeasible = Vec::new();
    for (i, r) in results {
        let c = &cells[i];
        match r {
            Ok(row) => rows.push(row),
            Err(reason) => infeasible.push(InfeasibleRow {
                strategy: c.strategy,
                degree: c.degree,
                patches: c.patches,
                image_tokens: c.tokens,
                reason,
            }),
        }
    }
    write_table(&ctx.out, "sweep", &rows)?;
    write_table(&ctx.out, "infeasible", &infeasible)?;
    println!("{} cells: {} simulated, {} infeasible", cells.len(), rows.len(), infeasible.len());
    Ok(true)
}

#[derive(Serialize)]
struct PlanRow {
    rank: usize,
    label: String,
    placement: String,
    cfg: usize,
    pipefusion: usize,
    ulysses: usize,
    ring: usize,
    patches: usize,
    warmup: usize,
    feasible: bool,
    predicted_latency: Option<f64>,
    step_latency: Option<f64>,
    compute_time: Option<f64>,
    exposed_comm_time: Option<f64>,
    step_comm_bytes: Option<f64>,
    param_bytes: Option<f64>,
    kv_bytes: Option<f64>,
    violation: Option<String>,
}

pub fn cmd_plan(args: &PlanArgs) -> Result<bool> {
    let ctx = Context::load(&args.common, "out/plan")?;
    let (mut spec, sched) = if args.common.config.is_some() {
        (ctx.config.model.clone(), ctx.config.sched())
    } else {
        (DiTSpec::pixart_like(), DiffusionSpec::linear(20).with_guidance(4.5))
    };
    if let Some(t) = &args.tokens {
        spec.image_tokens = match t.parse::<usize>() {
            Ok(n) => n,
            Err(_) => TokenPreset::parse(t)?.tokens(),
        };
    }
    let topo = ctx.topology(args.devices.unwrap_or(1))?;
    let n = args.devices.unwrap_or_else(|| topo.num_devices());
    if n == 0 {
        return Err(Error::Config("--devices must be positive".into()));
    }
    let opts = PlanOptions {
        element_size: args.element_size,
        warmup_steps: args.warmup,
        exhaustive_placement: args.exhaustive,
        ..PlanOptions::default()
    };
    let ranked = rank_plans(enumerate_plans(n, &spec, &sched, &topo, &opts))?;
    let rows: Vec<PlanRow> = ranked
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let r = c.report.as_ref();
            PlanRow {
                rank: i + 1,
                label: c.config.label(),
                placement: c.placement.label(),
                cfg: c.config.cfg_degree,
                pipefusion: c.config.pipefusion_degree,
                ulysses: c.config.ulysses_degree,
                ring: c.config.ring_degree,
                patches: c.config.num_patches,
                warmup: c.config.warmup_steps,
                feasible: c.is_feasible(),
                predicted_latency: r.map(|r| r.end_to_end_latency),
                step_latency: r.map(|r| r.step_latency),
                compute_time: r.map(|r| r.compute_time),
                exposed_comm_time: r.map(|r| r.exposed_comm_time),
                step_comm_bytes: r.map(|r| r.step_comm_bytes),
                param_bytes: r.map(|r| r.param_bytes),
                kv_bytes: r.map(|r| r.kv_bytes),
                violation: c.violation.clone(),
            }
        })
        .collect();
    write_table(&ctx.out, "plans", &rows)?;
    let top = &rows[0];
    println!(
        "recommended: {} ({}) predicted {:.4e} s over {} steps",
        top.label,
        top.placement,
        top.predicted_latency.unwrap_or(f64::NAN),
        sched.num_steps
    );
    Ok(true)
}
