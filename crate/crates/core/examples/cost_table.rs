//! Nominal per-step communication and memory of each strategy as N grows.

use ditsim::cost::{comm_cost, memory_cost, ModelDims};
use ditsim::model::DiTSpec;
use ditsim::simnet::bytes_to_f64;
use ditsim::strategies::Strategy;

fn main() -> ditsim::Result<()> {
    let dims = ModelDims::from_spec(&DiTSpec::pixart_like(), 2);
    let strategies = [
        Strategy::TensorParallel,
        Strategy::SpUlysses,
        Strategy::SpRing,
        Strategy::DistriFusion,
        Strategy::PipeFusion,
    ];
    println!("{:<16} {:>3} {:>12} {:>8} {:>12} {:>12}", "strategy", "N", "comm MB", "overlap", "params MB", "kv MB");
    for s in strategies {
        for n in [2, 4, 8] {
            let c = comm_cost(s, &dims, n)?;
            let m = memory_cost(s, &dims, n)?;
            println!(
                "{:<16} {:>3} {:>12.1} {:>8} {:>12.1} {:>12.1}",
                s.name(),
                n,
                bytes_to_f64(&c.bytes) / 1e6,
                c.overlap,
                bytes_to_f64(&m.param_bytes) / 1e6,
                bytes_to_f64(&m.kv_bytes) / 1e6
            );
        }
    }
    Ok(())
}
