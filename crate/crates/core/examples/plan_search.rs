//! Ranks every hybrid for a Pixart-sized model on two PCIe nodes joined by
//! Ethernet, then on one NVLink node.

use ditsim::cost::{enumerate_plans, rank_plans, PlanOptions};
use ditsim::model::{DiTSpec, DiffusionSpec};
use ditsim::simnet::Topology;

fn main() -> ditsim::Result<()> {
    let spec = DiTSpec::pixart_like();
    let sched = DiffusionSpec::linear(20).with_guidance(4.5);
    for (name, topo, n) in [
        ("2 x 8 pcie/ethernet", Topology::two_node_pcie_ethernet(8), 16),
        ("8 x nvlink", Topology::nvlink_node(8), 8),
    ] {
        let ranked = rank_plans(enumerate_plans(n, &spec, &sched, &topo, &PlanOptions::default()))?;
        println!("{name}:");
        for c in ranked.iter().filter(|c| c.is_feasible()).take(5) {
            let r = c.report.as_ref().expect("feasible");
            println!(
                "  {:<24} {:>9.4} s  (compute {:.4}, exposed comm {:.4} per step)",
                c.config.label(),
                r.end_to_end_latency,
                r.compute_time,
                r.exposed_comm_time
            );
        }
        let rejected = ranked.iter().filter(|c| !c.is_feasible()).count();
        println!("  {rejected} infeasible");
    }
    Ok(())
}
