//! Ulysses, Ring and their 2-D combination on the same problem.

use ditsim::model::{BlockTopology, ConditioningMode, DiTSpec, DiffusionSpec};
use ditsim::simnet::{bytes_to_f64, Topology};
use ditsim::strategies::{max_rel_err, run_strategy, ParallelConfig, Problem, RunOptions};

fn main() -> ditsim::Result<()> {
    let p = Problem::seeded(
        DiTSpec::desk(ConditioningMode::InContext, BlockTopology::Linear),
        DiffusionSpec::linear(8),
        2,
    )?;
    let serial = p.serial()?;
    let topo = Topology::nvlink_node(4);
    let configs = [
        ParallelConfig::ulysses(2),
        ParallelConfig::ulysses(4),
        ParallelConfig::ring(2),
        ParallelConfig::ring(4),
        ParallelConfig::usp(2, 2),
    ];
    println!("{:<24} {:>10} {:>14} {:>12}", "config", "rel err", "bytes/step", "latency s");
    for c in configs {
        let out = run_strategy(&p, &c, &topo, &RunOptions::default())?;
        println!(
            "{:<24} {:>10.2e} {:>14.0} {:>12.3e}",
            c.label(),
            max_rel_err(&out.trace, &serial)?,
            bytes_to_f64(&out.per_step_bytes()),
            out.report.makespan()
        );
    }
    Ok(())
}
