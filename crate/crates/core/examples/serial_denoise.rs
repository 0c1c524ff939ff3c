//! Runs the reference denoising loop on the desk model and prints how the
//! latent moves per step.

use ditsim::io::checksum;
use ditsim::model::{BlockTopology, ConditioningMode, DiTSpec, DiffusionSpec};
use ditsim::strategies::Problem;

fn main() -> ditsim::Result<()> {
    let spec = DiTSpec::desk(ConditioningMode::CrossAttention, BlockTopology::USkip);
    let p = Problem::seeded(spec, DiffusionSpec::linear(8), 7)?;
    let trace = p.serial()?;
    for w in trace.windows(2) {
        let step = w[1].x.sub(&w[0].x)?;
        println!("t={} -> {}  |dx|={:.4e}", w[0].t, w[1].t, step.l2());
    }
    let c = checksum(&trace.last().expect("non-empty").x);
    println!("final latent: sum={:.6} l2={:.6}", c.sum, c.l2);
    Ok(())
}
