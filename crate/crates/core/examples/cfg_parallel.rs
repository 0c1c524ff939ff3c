//! Conditional and unconditional branches on separate device groups.

use ditsim::model::{BlockTopology, ConditioningMode, DiTSpec, DiffusionSpec};
use ditsim::simnet::Topology;
use ditsim::strategies::{max_rel_err, run_cfg_parallel, ParallelConfig, Problem};

fn main() -> ditsim::Result<()> {
    let p = Problem::seeded(
        DiTSpec::desk(ConditioningMode::CrossAttention, BlockTopology::USkip),
        DiffusionSpec::linear(8).with_guidance(4.5),
        6,
    )?;
    let serial = p.serial()?;
    let topo = Topology::nvlink_node(8);
    for inner in [ParallelConfig::serial(), ParallelConfig::ulysses(2), ParallelConfig::usp(2, 2)] {
        let out = run_cfg_parallel(&p, inner.clone(), &topo)?;
        println!(
            "cfg x {}: {} devices, rel err {:.2e}, latency {:.3e} s",
            inner.label(),
            2 * inner.num_devices(),
            max_rel_err(&out.trace, &serial)?,
            out.report.makespan()
        );
    }
    Ok(())
}
