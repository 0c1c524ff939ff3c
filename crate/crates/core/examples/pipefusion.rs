//! Patch pipeline with stale K/V: per-step divergence from serial, and how
//! the fresh area grows across micro-steps.

use ditsim::model::{BlockTopology, ConditioningMode, DiTSpec, DiffusionSpec};
use ditsim::simnet::Topology;
use ditsim::strategies::{divergence, run_pipefusion, Problem};

fn main() -> ditsim::Result<()> {
    let p = Problem::seeded(
        DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::USkip),
        DiffusionSpec::linear(8),
        3,
    )?;
    let serial = p.serial()?;
    let out = run_pipefusion(&p, 4, 4, 1, &Topology::nvlink_node(4))?;
    for row in divergence(&out.trace, &serial)? {
        println!("t={}  max_abs={:.3e}  rel_l2={:.3e}", row.step, row.max_abs, row.rel_l2);
    }
    let t = 6;
    for m in 0..out.freshness.micro_steps(t) {
        println!("step {t} micro {m}: fresh patches {:?}", out.freshness.fresh_patches(t, m, 0));
    }
    println!("params per stage: {:?}", out.params_per_device);
    Ok(())
}
