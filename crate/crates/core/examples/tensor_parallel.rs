//! Megatron-style head/FFN sharding: exact, but two all-reduces per layer.

use ditsim::model::{BlockTopology, ConditioningMode, DiTSpec, DiffusionSpec};
use ditsim::simnet::{bytes_to_f64, Topology};
use ditsim::strategies::{max_rel_err, run_tensor_parallel, Problem};

fn main() -> ditsim::Result<()> {
    let p = Problem::seeded(
        DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::Linear),
        DiffusionSpec::linear(8),
        1,
    )?;
    let serial = p.serial()?;
    let topo = Topology::nvlink_node(4);
    for n in [1, 2, 4] {
        let out = run_tensor_parallel(&p, n, &topo)?;
        println!(
            "tp{n}: max rel err {:.2e}, {:.0} bytes/device/step, {:.3e} s",
            max_rel_err(&out.trace, &serial)?,
            bytes_to_f64(&out.per_step_bytes()),
            out.report.makespan()
        );
    }
    Ok(())
}
