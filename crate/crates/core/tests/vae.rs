use ditsim::rng::SeededRng;
use ditsim::simnet::{bytes, Topology};
use ditsim::tensor::conv2d;
use ditsim::vae::{
    chunk_temp_elements, chunked_conv, halo_bytes, patch_parallel_decode, peak_memory_estimate, serial_decode,
    serial_decode_instrumented, DecodeOptions, HaloAccounting, VaeSpec, VaeWeights,
};
use proptest::prelude::*;

fn setup(c: usize, h: usize, w: usize, seed: u64) -> (VaeSpec, VaeWeights, ditsim::tensor::Tensor) {
    let spec = VaeSpec::desk(c);
    let mut rng = SeededRng::new(seed);
    let weights = VaeWeights::init(&spec, &mut rng);
    let latent = rng.normal_tensor(&[c, h, w]);
    (spec, weights, latent)
}

#[test]
fn parallel_decode_matches_serial() {
    let topo = Topology::nvlink_node(4);
    for seed in 0..3 {
        for c in [4, 16] {
            let (spec, weights, latent) = setup(c, 8, 8, seed);
            let serial = serial_decode(&spec, &weights, &latent).unwrap();
            for n in [1, 2, 4] {
                let out = patch_parallel_decode(&spec, &weights, &latent, n, &topo, &DecodeOptions::default()).unwrap();
                assert!(out.image.max_abs_diff(&serial).unwrap() <= 1e-12, "n={n}");
                if n == 1 {
                    assert!(out.image.bit_eq(&serial));
                    assert_eq!(out.report.total_bytes(), bytes(0));
                }
            }
        }
    }
}

#[test]
fn halo_traffic_matches_simulation() {
    let topo = Topology::two_node_pcie_ethernet(2);
    let (spec, weights, latent) = setup(4, 8, 6, 9);
    for n in [2, 4] {
        let out = patch_parallel_decode(&spec, &weights, &latent, n, &topo, &DecodeOptions::default()).unwrap();
        let p2p = halo_bytes(&spec, 6, n, 8, HaloAccounting::PointToPoint).unwrap();
        assert_eq!(out.report.max_device_bytes(), bytes(p2p));
        let gather = halo_bytes(&spec, 6, n, 8, HaloAccounting::AllGather).unwrap();
        assert!(gather >= p2p);
    }
}

#[test]
fn bands_thinner_than_halo_are_rejected() {
    let (spec, weights, latent) = setup(4, 4, 4, 1);
    let topo = Topology::nvlink_node(8);
    assert!(patch_parallel_decode(&spec, &weights, &latent, 8, &topo, &DecodeOptions::default()).is_err());
    assert!(patch_parallel_decode(&spec, &weights, &latent, 0, &topo, &DecodeOptions::default()).is_err());
}

#[test]
fn estimator_bounds_and_decreases() {
    let topo = Topology::nvlink_node(8);
    for c in [4, 16] {
        let (spec, weights, latent) = setup(c, 8, 8, 2);
        let (_, serial_peak) = serial_decode_instrumented(&spec, &weights, &latent, 8).unwrap();
        let full = 8 << spec.stages();
        assert_eq!(peak_memory_estimate(&spec, 8, 8, 1, full, 8).unwrap().total, serial_peak);
        for chunk in [1, 2, 4, full] {
            let mut last = u64::MAX;
            for n in [1, 2, 4, 8] {
                let est = peak_memory_estimate(&spec, 8, 8, n, chunk, 8).unwrap();
                assert!(est.total <= last, "c={c} chunk={chunk} n={n}");
                last = est.total;
                let opts = DecodeOptions {
                    chunk_rows: Some(chunk),
                    element_size: 8,
                };
                let out = patch_parallel_decode(&spec, &weights, &latent, n, &topo, &opts).unwrap();
                let measured = *out.peak_bytes.iter().max().unwrap();
                assert!(est.total >= measured, "c={c} chunk={chunk} n={n}: {} < {measured}", est.total);
            }
        }
    }
}

#[test]
fn chunking_caps_temp_memory() {
    let spec = VaeSpec::desk(4);
    let small = peak_memory_estimate(&spec, 8, 8, 1, 1, 8).unwrap();
    let big = peak_memory_estimate(&spec, 8, 8, 1, 32, 8).unwrap();
    assert!(small.temp < big.temp);
    assert!(chunk_temp_elements(16, 3, 1, 8) * 8 == chunk_temp_elements(16, 3, 8, 8));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn chunked_conv_is_bit_exact(seed in any::<u64>(), h in 1usize..10, w in 1usize..10, chunk in 1usize..12, k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut rng = SeededRng::new(seed);
        let x = rng.normal_tensor(&[2, h, w]);
        let kernel = rng.normal_tensor(&[3, 2, k, k]);
        let got = chunked_conv(&x, &kernel, chunk).unwrap();
        prop_assert!(got.output.bit_eq(&conv2d(&x, &kernel).unwrap()));
        prop_assert_eq!(got.temp_elements, chunk_temp_elements(2, k, chunk.min(h), w));
    }

    #[test]
    fn parallel_decode_any_split(seed in any::<u64>(), h in prop::sample::select(vec![4usize, 6, 8]), n in 1usize..=4) {
        let (spec, weights, latent) = setup(4, h, 5, seed);
        let serial = serial_decode(&spec, &weights, &latent).unwrap();
        let out = patch_parallel_decode(&spec, &weights, &latent, n, &Topology::nvlink_node(4), &DecodeOptions::default()).unwrap();
        prop_assert!(out.image.max_abs_diff(&serial).unwrap() <= 1e-12);
    }
}
