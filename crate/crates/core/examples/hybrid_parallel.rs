//! Pipeline × sequence parallel hybrids agree with pure PipeFusion, and
//! shard-only K/V buffers are caught.

use ditsim::model::{BlockTopology, ConditioningMode, DiTSpec, DiffusionSpec};
use ditsim::simnet::Topology;
use ditsim::strategies::{max_rel_err, run_hybrid, run_pipefusion, KvMode, ParallelConfig, Problem, RunOptions};

fn main() -> ditsim::Result<()> {
    let p = Problem::seeded(
        DiTSpec::desk(ConditioningMode::AdalnZero, BlockTopology::Linear),
        DiffusionSpec::linear(8),
        5,
    )?;
    let topo = Topology::nvlink_node(8);
    let pure = run_pipefusion(&p, 4, 4, 1, &topo)?;
    let hybrid = ParallelConfig::hybrid(1, 4, 2, 1, 4, 1);
    let out = run_hybrid(&p, &hybrid, &topo, &RunOptions::default())?;
    println!(
        "{}: vs pipefusion {:.2e}, {} consistency checks, {} violations",
        hybrid.label(),
        max_rel_err(&out.trace, &pure.trace)?,
        out.kv.checks,
        out.kv.violations
    );
    let naive = RunOptions {
        kv_mode: KvMode::NaiveSp,
        ..RunOptions::default()
    };
    match run_hybrid(&p, &hybrid, &topo, &naive) {
        Err(e) => println!("naive buffers: {e}"),
        Ok(_) => println!("naive buffers went unnoticed"),
    }
    Ok(())
}
