use ditsim::model::{BlockTopology, ConditioningMode, DiTSpec, DiffusionSpec};
use ditsim::simnet::Topology;
use ditsim::strategies::{
    divergence, max_rel_err, run_hybrid, run_strategy, staleness_oracle, KvCheck, KvMode, ParallelConfig, Problem,
    RunOptions, StaleStrategy,
};
use ditsim::Error;

fn problem(mode: ConditioningMode, topo: BlockTopology, guidance: Option<f64>, seed: u64) -> Problem {
    let spec = DiTSpec::desk(mode, topo);
    let mut sched = DiffusionSpec::linear(8);
    sched.guidance_scale = guidance;
    Problem::seeded(spec, sched, seed).unwrap()
}

fn all_problems() -> Vec<Problem> {
    let mut v = Vec::new();
    for (i, mode) in ConditioningMode::ALL.into_iter().enumerate() {
        for (j, topo) in [BlockTopology::Linear, BlockTopology::USkip].into_iter().enumerate() {
            v.push(problem(mode, topo, None, (10 * i + j) as u64));
        }
    }
    v
}

fn bit_identical(a: &ditsim::model::Trace, b: &ditsim::model::Trace) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.t == y.t && x.x.bit_eq(&y.x))
}

#[test]
fn exact_strategies_match_serial() {
    let topo = Topology::nvlink_node(8);
    let configs = [
        ParallelConfig::tensor_parallel(2),
        ParallelConfig::tensor_parallel(4),
        ParallelConfig::ulysses(2),
        ParallelConfig::ulysses(4),
        ParallelConfig::ring(2),
        ParallelConfig::ring(4),
        ParallelConfig::usp(2, 2),
    ];
    for p in all_problems() {
        let serial = p.serial().unwrap();
        for c in &configs {
            let out = run_strategy(&p, c, &topo, &RunOptions::default()).unwrap();
            let e = max_rel_err(&out.trace, &serial).unwrap();
            assert!(e <= 1e-10, "{} {:?}: {e}", c.label(), p.spec.conditioning);
        }
    }
}

#[test]
fn ulysses_is_bit_exact() {
    let topo = Topology::nvlink_node(8);
    for p in all_problems() {
        let serial = p.serial().unwrap();
        let out = run_strategy(&p, &ParallelConfig::ulysses(4), &topo, &RunOptions::default()).unwrap();
        assert!(bit_identical(&out.trace, &serial));
    }
}

#[test]
fn cfg_parallel_matches_guided_serial() {
    let topo = Topology::nvlink_node(8);
    for mode in ConditioningMode::ALL {
        let p = problem(mode, BlockTopology::USkip, Some(4.5), 3);
        let serial = p.serial().unwrap();
        for inner in [ParallelConfig::serial(), ParallelConfig::ulysses(2), ParallelConfig::usp(2, 2)] {
            let c = ParallelConfig::cfg_parallel(inner);
            let out = run_strategy(&p, &c, &topo, &RunOptions::default()).unwrap();
            assert!(max_rel_err(&out.trace, &serial).unwrap() <= 1e-10, "{}", c.label());
        }
        let exact = run_strategy(&p, &ParallelConfig::cfg_parallel(ParallelConfig::serial()), &topo, &RunOptions::default()).unwrap();
        assert!(bit_identical(&exact.trace, &serial));
    }
}

#[test]
fn guidance_zero_is_unconditional() {
    let topo = Topology::nvlink_node(2);
    let p = problem(ConditioningMode::CrossAttention, BlockTopology::Linear, Some(0.0), 4);
    let out = run_strategy(&p, &ParallelConfig::cfg_parallel(ParallelConfig::serial()), &topo, &RunOptions::default()).unwrap();
    let mut unc = p.clone();
    unc.sched.guidance_scale = None;
    unc.cond = p.cond.null_like();
    let reference = unc.serial().unwrap();
    assert!(bit_identical(&out.trace, &reference));
}

#[test]
fn degree_one_is_bit_identical() {
    let topo = Topology::nvlink_node(1);
    for p in all_problems() {
        let serial = p.serial().unwrap();
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
            let out = run_strategy(&p, &c, &topo, &RunOptions::default()).unwrap();
            assert!(bit_identical(&out.trace, &serial), "{}", c.label());
        }
    }
}

#[test]
fn full_warmup_is_bit_identical() {
    let topo = Topology::nvlink_node(8);
    for p in [
        problem(ConditioningMode::InContext, BlockTopology::USkip, None, 1),
        problem(ConditioningMode::CrossAttention, BlockTopology::Linear, Some(3.0), 2),
    ] {
        let serial = p.serial().unwrap();
        for (n, m) in [(2, 2), (2, 4), (4, 4), (4, 8)] {
            let pf = run_strategy(&p, &ParallelConfig::pipefusion(n, m, 8), &topo, &RunOptions::default()).unwrap();
            assert!(bit_identical(&pf.trace, &serial), "pipefusion {n} {m}");
            let df = run_strategy(&p, &ParallelConfig::distrifusion(n, 8), &topo, &RunOptions::default()).unwrap();
            assert!(bit_identical(&df.trace, &serial), "distrifusion {n}");
        }
    }
}

#[test]
fn stamps_match_staleness_oracle() {
    let topo = Topology::nvlink_node(8);
    let p = problem(ConditioningMode::AdalnZero, BlockTopology::USkip, None, 5);
    for (n, m, w) in [(4, 4, 1), (2, 4, 2), (4, 8, 3), (1, 2, 1)] {
        let out = run_strategy(&p, &ParallelConfig::pipefusion(n, m, w), &topo, &RunOptions::default()).unwrap();
        let oracle = staleness_oracle(StaleStrategy::PipeFusion, n, m, 4, 8, w).unwrap();
        assert_eq!(out.freshness, oracle, "pipefusion {n} {m} {w}");
    }
    for (n, w) in [(4, 1), (2, 3)] {
        let out = run_strategy(&p, &ParallelConfig::distrifusion(n, w), &topo, &RunOptions::default()).unwrap();
        let oracle = staleness_oracle(StaleStrategy::DistriFusion, n, n, 4, 8, w).unwrap();
        assert_eq!(out.freshness, oracle, "distrifusion {n} {w}");
    }
}

#[test]
fn hybrids_match_pure_pipefusion() {
    let topo = Topology::nvlink_node(8);
    for mode in ConditioningMode::ALL {
        let p = problem(mode, BlockTopology::USkip, Some(2.0), 7);
        let pf4 = run_strategy(&p, &ParallelConfig::pipefusion(4, 4, 1), &topo, &RunOptions::default()).unwrap();
        let h1 = run_hybrid(&p, &ParallelConfig::hybrid(1, 4, 2, 1, 4, 1), &topo, &RunOptions::default()).unwrap();
        assert!(max_rel_err(&h1.trace, &pf4.trace).unwrap() <= 1e-10);
        let pf2 = run_strategy(&p, &ParallelConfig::pipefusion(2, 4, 1), &topo, &RunOptions::default()).unwrap();
        let h2 = run_hybrid(&p, &ParallelConfig::hybrid(2, 2, 1, 2, 4, 1), &topo, &RunOptions::default()).unwrap();
        assert!(max_rel_err(&h2.trace, &pf2.trace).unwrap() <= 1e-10);
        assert!(h1.kv.checks > 0 && h1.kv.violations == 0);
    }
}

#[test]
fn naive_sp_buffers_are_caught() {
    let topo = Topology::nvlink_node(8);
    let p = problem(ConditioningMode::AdalnZero, BlockTopology::Linear, None, 8);
    let cfg = ParallelConfig::hybrid(1, 4, 2, 1, 4, 1);
    let naive = RunOptions {
        kv_mode: KvMode::NaiveSp,
        ..RunOptions::default()
    };
    match run_hybrid(&p, &cfg, &topo, &naive) {
        Err(Error::KvInconsistent { max_abs, .. }) => assert!(max_abs > 0.0),
        other => panic!("expected a consistency failure, got {:?}", other.map(|o| o.kv)),
    }
    let report = RunOptions {
        kv_check: KvCheck::Report,
        ..naive
    };
    let out = run_hybrid(&p, &ParallelConfig::hybrid(1, 2, 1, 2, 4, 1), &topo, &report).unwrap();
    assert!(out.kv.violations > 0);
}

#[test]
fn pipefusion_divergence_is_finite_and_zero_in_warmup() {
    let topo = Topology::nvlink_node(4);
    let p = problem(ConditioningMode::InContext, BlockTopology::Linear, None, 9);
    let serial = p.serial().unwrap();
    let out = run_strategy(&p, &ParallelConfig::pipefusion(4, 4, 1), &topo, &RunOptions::default()).unwrap();
    let d = divergence(&out.trace, &serial).unwrap();
    assert_eq!(d[0].max_abs, 0.0);
    assert_eq!(d[1].max_abs, 0.0);
    assert!(d.iter().all(|r| r.max_abs.is_finite() && r.rel_l2.is_finite()));
    assert!(d.last().unwrap().max_abs > 0.0);
}

#[test]
fn runs_are_deterministic() {
    let topo = Topology::two_node_pcie_ethernet(4);
    let p = problem(ConditioningMode::CrossAttention, BlockTopology::USkip, Some(5.0), 11);
    let c = ParallelConfig::hybrid(2, 2, 2, 1, 4, 2);
    let a = run_strategy(&p, &c, &topo, &RunOptions::default()).unwrap();
    let b = run_strategy(&p, &c, &topo, &RunOptions::default()).unwrap();
    assert!(bit_identical(&a.trace, &b.trace));
    assert_eq!(a.log, b.log);
    assert_eq!(a.report, b.report);
}

#[test]
fn degenerate_usp_axes_reproduce_message_logs() {
    let topo = Topology::nvlink_node(4);
    let p = problem(ConditioningMode::InContext, BlockTopology::Linear, None, 12);
    let o = RunOptions::default();
    let a = run_strategy(&p, &ParallelConfig::usp(4, 1), &topo, &o).unwrap();
    let b = run_strategy(&p, &ParallelConfig::ulysses(4), &topo, &o).unwrap();
    assert_eq!(a.log, b.log);
    let a = run_strategy(&p, &ParallelConfig::usp(1, 4), &topo, &o).unwrap();
    let b = run_strategy(&p, &ParallelConfig::ring(4), &topo, &o).unwrap();
    assert_eq!(a.log, b.log);
    let h = run_strategy(&p, &ParallelConfig::hybrid(1, 1, 4, 1, 1, 0), &topo, &o).unwrap();
    let u = run_strategy(&p, &ParallelConfig::ulysses(4), &topo, &o).unwrap();
    assert_eq!(h.log, u.log);
}
