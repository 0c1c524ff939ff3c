//! Frozen checksums of the reference paths. A change here means the numerics
//! changed; update the constants only deliberately.

use ditsim::io::{checksum, Checksum};
use ditsim::model::{model_forward, BlockTopology, ConditioningMode, DiTSpec, DiffusionSpec, LatentState};
use ditsim::rng::SeededRng;
use ditsim::strategies::Problem;
use ditsim::vae::{serial_decode, VaeSpec, VaeWeights};

fn desk_problem() -> Problem {
    Problem::seeded(
        DiTSpec::desk(ConditioningMode::CrossAttention, BlockTopology::USkip),
        DiffusionSpec::linear(8),
        2024,
    )
    .unwrap()
}

fn assert_close(got: Checksum, want: Checksum) {
    for (g, w) in [(got.sum, want.sum), (got.l2, want.l2)] {
        assert!((g - w).abs() <= 1e-12 * w.abs().max(1.0), "{got:?} vs {want:?}");
    }
}

#[test]
fn serial_eps() {
    let p = desk_problem();
    let state = LatentState { x: p.x_t.clone(), t: 8 };
    let eps = model_forward(&p.spec, &p.weights, &state, &p.cond).unwrap();
    assert_close(checksum(&eps), Checksum { sum: -1.0139236924615858, l2: 0.17757458698108283 });
}

#[test]
fn serial_trace() {
    let trace = desk_problem().serial().unwrap();
    assert_close(checksum(&trace.last().unwrap().x), Checksum { sum: 19.763515090187106, l2: 14.768763245983063 });
}

#[test]
fn vae_decode() {
    let spec = VaeSpec::desk(4);
    let mut rng = SeededRng::new(2024);
    let w = VaeWeights::init(&spec, &mut rng);
    let latent = rng.normal_tensor(&[4, 8, 8]);
    let image = serial_decode(&spec, &w, &latent).unwrap();
    assert_eq!(image.shape(), &[3, 32, 32]);
    assert_close(checksum(&image), Checksum { sum: -250.20141513482008, l2: 11.858928324877235 });
}
