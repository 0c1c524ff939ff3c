//! Patch data parallelism with asynchronous K/V refresh.

use ditsim::model::{BlockTopology, ConditioningMode, DiTSpec, DiffusionSpec};
use ditsim::simnet::Topology;
use ditsim::strategies::{max_rel_err, run_distrifusion, Problem};

fn main() -> ditsim::Result<()> {
    let p = Problem::seeded(
        DiTSpec::desk(ConditioningMode::CrossAttention, BlockTopology::Linear),
        DiffusionSpec::linear(8),
        4,
    )?;
    let serial = p.serial()?;
    let topo = Topology::two_node_pcie_ethernet(2);
    for warmup in [1, 2, 8] {
        let out = run_distrifusion(&p, 4, warmup, &topo)?;
        println!(
            "warmup {warmup}: rel err {:.3e}, latency {:.3e} s, kv bytes/device {:?}",
            max_rel_err(&out.trace, &serial)?,
            out.report.makespan(),
            out.kv_bytes_per_device
        );
    }
    Ok(())
}
