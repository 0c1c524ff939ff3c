//! Row-band parallel decode with halo exchange, and the memory it saves.

use ditsim::rng::SeededRng;
use ditsim::simnet::{bytes_to_f64, Topology};
use ditsim::vae::{patch_parallel_decode, peak_memory_estimate, serial_decode, DecodeOptions, VaeSpec, VaeWeights};

fn main() -> ditsim::Result<()> {
    let spec = VaeSpec::desk(4);
    let mut rng = SeededRng::new(0);
    let weights = VaeWeights::init(&spec, &mut rng);
    let latent = rng.normal_tensor(&[4, 16, 16]);
    let serial = serial_decode(&spec, &weights, &latent)?;
    println!("image {:?}", serial.shape());
    let topo = Topology::nvlink_node(8);
    for n in [1, 2, 4, 8] {
        let opts = DecodeOptions {
            chunk_rows: Some(8),
            ..DecodeOptions::default()
        };
        let out = patch_parallel_decode(&spec, &weights, &latent, n, &topo, &opts)?;
        let est = peak_memory_estimate(&spec, 16, 16, n, 8, opts.element_size)?;
        println!(
            "N={n}: diff {:.1e}, halo bytes {:.0}, peak {} B (estimate {} B)",
            out.image.max_abs_diff(&serial)?,
            bytes_to_f64(&out.report.total_bytes()),
            out.peak_bytes.iter().max().unwrap_or(&0),
            est.total
        );
    }
    Ok(())
}
