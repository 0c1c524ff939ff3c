use ditsim::cost::{
    comm_cost, enumerate_plans, memory_cost, memory_footprint, predict_latency, rank_plans, step_traffic, ModelDims,
    Placement, PlanOptions,
};
use ditsim::model::{BlockTopology, ConditioningMode, DiTSpec, DiffusionSpec};
use ditsim::simnet::{bytes, LinkKind, Topology};
use ditsim::strategies::{run_strategy, ParallelConfig, Problem, RunOptions, Strategy};
use proptest::prelude::*;

fn configs() -> Vec<ParallelConfig> {
    vec![
        ParallelConfig::serial(),
        ParallelConfig::tensor_parallel(2),
        ParallelConfig::tensor_parallel(4),
        ParallelConfig::ulysses(2),
        ParallelConfig::ulysses(4),
        ParallelConfig::ring(2),
        ParallelConfig::ring(4),
        ParallelConfig::usp(2, 2),
        ParallelConfig::cfg_parallel(ParallelConfig::serial()),
        ParallelConfig::pipefusion(2, 4, 1),
        ParallelConfig::pipefusion(4, 4, 2),
        ParallelConfig::pipefusion(4, 8, 1),
        ParallelConfig::distrifusion(2, 1),
        ParallelConfig::distrifusion(4, 2),
        ParallelConfig::hybrid(1, 2, 2, 1, 4, 1),
        ParallelConfig::hybrid(1, 2, 1, 2, 2, 1),
        ParallelConfig::hybrid(2, 2, 1, 2, 4, 1),
        ParallelConfig::hybrid(2, 1, 2, 2, 1, 0),
        ParallelConfig::hybrid(2, 2, 2, 1, 2, 1),
    ]
}

#[test]
fn step_traffic_matches_simulated_bytes() {
    let topo = Topology::nvlink_node(8);
    for mode in ConditioningMode::ALL {
        for bt in [BlockTopology::Linear, BlockTopology::USkip] {
            let spec = DiTSpec::desk(mode, bt);
            let sched = DiffusionSpec::linear(4).with_guidance(3.0);
            let p = Problem::seeded(spec.clone(), sched.clone(), 1).unwrap();
            for c in configs() {
                let out = run_strategy(&p, &c, &topo, &RunOptions::default()).unwrap();
                let predicted = step_traffic(&c, &spec, sched.branches(), 8).device_totals();
                assert_eq!(predicted.len(), c.num_devices(), "{}", c.label());
                for d in 0..c.num_devices() {
                    assert_eq!(
                        predicted[d] * bytes(sched.num_steps as u64),
                        out.report.device_bytes[d],
                        "{} {mode:?} {bt:?} device {d}",
                        c.label(),
                    );
                }
                let mem = memory_footprint(&c, &spec, sched.branches(), 8);
                assert_eq!(mem.params_per_device, out.params_per_device, "{} params", c.label());
                assert_eq!(mem.kv_bytes_per_device, out.kv_bytes_per_device, "{} kv", c.label());
            }
        }
    }
}

#[test]
fn exact_strategy_latency_matches_simulation() {
    let mut spec = DiTSpec::desk(ConditioningMode::CrossAttention, BlockTopology::USkip);
    spec.image_tokens = 128;
    let sched = DiffusionSpec::linear(4).with_guidance(2.0);
    let p = Problem::seeded(spec.clone(), sched.clone(), 2).unwrap();
    for topo in [Topology::nvlink_node(8), Topology::two_node_pcie_ethernet(4)] {
        for c in [
            ParallelConfig::serial(),
            ParallelConfig::tensor_parallel(4),
            ParallelConfig::ulysses(4),
            ParallelConfig::ring(4),
            ParallelConfig::usp(2, 2),
        ] {
            let sim = run_strategy(&p, &c, &topo, &RunOptions::default()).unwrap().report.makespan();
            let pred = predict_latency(&c, &Placement::default(), &spec, &sched, &topo, 8)
                .unwrap()
                .end_to_end_latency;
            assert!((pred - sim).abs() <= 1e-2 * sim, "{}: {pred} vs {sim}", c.label());
        }
    }
}

fn desk_dims() -> ModelDims {
    ModelDims::from_spec(&DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::Linear), 8)
}

#[test]
fn table_orderings() {
    let dims = desk_dims();
    let l = dims.num_layers;
    for n in 2..2 * l {
        let pf = comm_cost(Strategy::PipeFusion, &dims, n).unwrap().bytes;
        assert!(pf < comm_cost(Strategy::SpRing, &dims, n).unwrap().bytes, "n={n}");
        assert!(pf < comm_cost(Strategy::SpUlysses, &dims, n).unwrap().bytes, "n={n}");
    }
    for n in [2 * l, 4 * l] {
        let pf = comm_cost(Strategy::PipeFusion, &dims, n).unwrap().bytes;
        assert!(pf >= comm_cost(Strategy::SpUlysses, &dims, n).unwrap().bytes);
    }
    for n in [1, 2, 4, 8] {
        let a = comm_cost(Strategy::SpUlysses, &dims, 2 * n).unwrap().bytes;
        let b = comm_cost(Strategy::SpUlysses, &dims, n).unwrap().bytes;
        if n > 1 {
            assert_eq!(a * bytes(2), b);
        }
        let df = memory_cost(Strategy::DistriFusion, &dims, n).unwrap();
        assert_eq!(df.kv_bytes, memory_cost(Strategy::DistriFusion, &dims, 1).unwrap().kv_bytes);
        let pf = memory_cost(Strategy::PipeFusion, &dims, n).unwrap();
        let pf1 = memory_cost(Strategy::PipeFusion, &dims, 1).unwrap();
        assert_eq!(pf.kv_bytes * bytes(n as u64), pf1.kv_bytes);
        assert_eq!(pf.param_bytes * bytes(n as u64), dims.param_bytes());
    }
}

#[test]
fn pipefusion_weights_partition_the_model() {
    let topo = Topology::nvlink_node(4);
    for bt in [BlockTopology::Linear, BlockTopology::USkip] {
        let spec = DiTSpec::desk(ConditioningMode::CrossAttention, bt);
        let p = Problem::seeded(spec.clone(), DiffusionSpec::linear(2), 3).unwrap();
        let total = p.weights.param_count();
        for n in [1, 2, 4] {
            let out = run_strategy(&p, &ParallelConfig::pipefusion(n, 4, 1), &topo, &RunOptions::default()).unwrap();
            assert_eq!(out.params_per_device.iter().sum::<usize>(), total);
            let share = total as f64 / n as f64;
            for &got in &out.params_per_device {
                assert!((got as f64 - share).abs() <= 0.05 * share, "{bt:?} n={n}: {got} vs {share}");
            }
            let nominal = memory_cost(Strategy::PipeFusion, &ModelDims::from_spec(&spec, 8), n).unwrap();
            assert_eq!(nominal.param_bytes * bytes(n as u64), bytes(8 * total as u64));
        }
    }
}

/// Ordered `(cfg, pp, u, r)` with product `n`, by brute force.
fn brute_force_count(n: usize, spec: &DiTSpec, guided: bool, patches: usize) -> usize {
    let mut count = 0;
    for cfg in 1..=2 {
        if cfg == 2 && !guided {
            continue;
        }
        for pp in 1..=n {
            for u in 1..=n {
                for r in 1..=n {
                    if cfg * pp * u * r == n {
                        count += if pp > 1 { patches } else { 1 };
                    }
                }
            }
        }
    }
    let _ = spec;
    count
}

#[test]
fn enumeration_is_exhaustive() {
    let spec = DiTSpec::pixart_like();
    let sched = DiffusionSpec::linear(20).with_guidance(4.5);
    let topo = Topology::nvlink_node(16);
    let opts = PlanOptions::default();
    for n in [1, 2, 6, 8, 16] {
        let plans = enumerate_plans(n, &spec, &sched, &topo, &opts);
        assert_eq!(plans.len(), brute_force_count(n, &spec, true, opts.patch_choices.len()), "n={n}");
    }
    let one = enumerate_plans(1, &spec, &sched, &topo, &opts);
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].config.num_devices(), 1);
    let unguided = enumerate_plans(8, &spec, &DiffusionSpec::linear(20), &topo, &opts);
    assert_eq!(unguided.len(), brute_force_count(8, &spec, false, opts.patch_choices.len()));
}

#[test]
fn sixteen_way_ulysses_is_infeasible_with_24_heads() {
    let mut spec = DiTSpec::pixart_like();
    spec.num_heads = 24;
    let sched = DiffusionSpec::linear(20).with_guidance(4.5);
    let plans = enumerate_plans(16, &spec, &sched, &Topology::two_node_pcie_ethernet(8), &PlanOptions::default());
    let u16: Vec<_> = plans.iter().filter(|p| p.config.ulysses_degree == 16).collect();
    assert!(!u16.is_empty());
    for p in u16 {
        assert!(p.report.is_none());
        assert!(p.violation.as_deref().unwrap().contains("16"), "{:?}", p.violation);
    }
    for p in &plans {
        assert_eq!(p.report.is_some(), p.violation.is_none());
    }
}

#[test]
fn inter_node_all_to_all_loses_to_cfg_across_nodes() {
    let spec = DiTSpec::pixart_like();
    let sched = DiffusionSpec::linear(20).with_guidance(4.5);
    let topo = Topology::two_node_pcie_ethernet(8);
    let opts = PlanOptions::default();
    let cfg_outer = ParallelConfig::hybrid(2, 1, 8, 1, 1, 0);
    let a = predict_latency(&cfg_outer, &Placement::default(), &spec, &sched, &topo, 2).unwrap();
    let crossing = ParallelConfig::hybrid(1, 1, 16, 1, 1, 0);
    let b = predict_latency(&crossing, &Placement::default(), &spec, &sched, &topo, 2).unwrap();
    assert!(a.end_to_end_latency < b.end_to_end_latency);
    let ranked = rank_plans(enumerate_plans(16, &spec, &sched, &topo, &opts)).unwrap();
    assert_eq!(ranked[0].config.cfg_degree, 2);
}

#[test]
fn comm_free_topology_leaves_pure_compute() {
    let spec = DiTSpec::pixart_like();
    let sched = DiffusionSpec::linear(10).with_guidance(4.5);
    let topo = Topology::single_node(8, LinkKind::Nvlink, f64::INFINITY, 0.0, 100_000.0);
    let mut steps = Vec::new();
    for c in [
        ParallelConfig::hybrid(1, 1, 8, 1, 1, 0),
        ParallelConfig::hybrid(1, 1, 1, 8, 1, 0),
        ParallelConfig::hybrid(2, 1, 2, 2, 1, 0),
        ParallelConfig::hybrid(2, 4, 1, 1, 8, 1),
    ] {
        let r = predict_latency(&c, &Placement::default(), &spec, &sched, &topo, 2).unwrap();
        assert_eq!(r.exposed_comm_time, 0.0, "{}", c.label());
        assert_eq!(r.step_latency, r.compute_time);
        steps.push(r.step_latency);
    }
    assert!(steps.windows(2).all(|w| (w[0] - w[1]).abs() <= 1e-12 * w[0]));
}

#[test]
fn rank_orders_hand_computed_pair() {
    let spec = DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::Linear);
    let sched = DiffusionSpec::linear(4);
    // 1 GB/s, 1 µs, 1 GFLOP/s: every term is easy to evaluate by hand.
    let topo = Topology::single_node(2, LinkKind::Pcie, 1.0, 1.0, 1.0);
    let plans = rank_plans(enumerate_plans(2, &spec, &sched, &topo, &PlanOptions { element_size: 8, ..Default::default() })).unwrap();
    let get = |label: &str| plans.iter().find(|p| p.config.label() == label).unwrap();
    let u = get("cfg1_pp1_u2_r1_m1_w0").report.clone().unwrap();
    let flops = ditsim::flops::forward(&spec) / 2.0 / 1e9;
    // Four all-to-alls per layer of (64/2)·32·8 bytes each.
    let a2a = 4.0 * 4.0 * (1e-6 + 32.0 * 32.0 * 8.0 / 1e9);
    assert!((u.step_latency - (flops + a2a)).abs() < 1e-12);
    let r = get("cfg1_pp1_u1_r2_m1_w0").report.clone().unwrap();
    let hop: f64 = 1e-6 + 2.0 * 32.0 * 32.0 * 8.0 / 1e9;
    let window: f64 = 4.0 * 32.0 * 32.0 * 32.0 / 1e9;
    assert!((r.step_latency - (flops + 4.0 * (hop - window).max(0.0))).abs() < 1e-12);
    let pos = |label: &str| plans.iter().position(|p| p.config.label() == label).unwrap();
    assert_eq!(pos("cfg1_pp1_u2_r1_m1_w0") < pos("cfg1_pp1_u1_r2_m1_w0"), u.end_to_end_latency < r.end_to_end_latency);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ranking_is_invariant_under_bandwidth_scaling(factor in 0.01f64..100.0, n in prop::sample::select(vec![2usize, 4, 8])) {
        let spec = DiTSpec::pixart_like();
        let sched = DiffusionSpec::linear(10).with_guidance(4.5);
        // Pure communication: zero latency and effectively infinite compute.
        let base = Topology::single_node(n, LinkKind::Pcie, 25.0, 0.0, f64::MAX / 1e12);
        let opts = PlanOptions { warmup_steps: 0, ..Default::default() };
        let base_rank = rank_plans(enumerate_plans(n, &spec, &sched, &base, &opts)).unwrap();
        let scaled = base.scale_bandwidth(factor);
        let scaled_lat: Vec<Option<f64>> = base_rank
            .iter()
            .map(|p| predict_latency(&p.config, &p.placement, &spec, &sched, &scaled, opts.element_size).ok().map(|r| r.end_to_end_latency))
            .collect();
        for (p, s) in base_rank.iter().zip(&scaled_lat) {
            match (p.latency(), s) {
                (Some(b), Some(s)) => prop_assert!((s * factor - b).abs() <= 1e-9 * b),
                (None, None) => {}
                _ => prop_assert!(false),
            }
        }
        let feasible: Vec<f64> = scaled_lat.iter().flatten().copied().collect();
        prop_assert!(feasible.windows(2).all(|w| w[0] <= w[1] * (1.0 + 1e-9)));
    }

    #[test]
    fn ranking_is_deterministic_and_total(n in 1usize..=8) {
        let spec = DiTSpec::desk(ConditioningMode::InContext, BlockTopology::USkip);
        let sched = DiffusionSpec::linear(4).with_guidance(1.5);
        let topo = Topology::two_node_pcie_ethernet(4);
        let a = rank_plans(enumerate_plans(n, &spec, &sched, &topo, &PlanOptions::default()));
        let b = rank_plans(enumerate_plans(n, &spec, &sched, &topo, &PlanOptions::default()));
        match (a, b) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(&a, &b);
                let lat: Vec<f64> = a.iter().filter_map(|p| p.latency()).collect();
                prop_assert!(lat.windows(2).all(|w| w[0] <= w[1]));
                let first_bad = a.iter().position(|p| !p.is_feasible()).unwrap_or(a.len());
                prop_assert!(a[first_bad..].iter().all(|p| !p.is_feasible()));
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false),
        }
    }
}
