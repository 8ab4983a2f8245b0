//! Seeded random streams. Every consumer draws from its own stream so that
//! enabling or disabling one component never shifts another's randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    InitBackbone = 1,
    InitRpn,
    InitHeads,
    InitImageDisc,
    InitInstanceDisc,
    InitCorrelation,
    SourceOrder,
    TargetOrder,
    RoiSampling,
    PairSampling,
    Scenes,
    Noise,
    GradCheck,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

/// Sub-stream for item `index` of a stream (e.g. one image of a split).
pub fn item_stream(seed: u64, which: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(which as u64);
    rng
}

/// Gaussian weights with standard deviation `std`.
pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// He-normal initialization for a layer with `fan_in` inputs.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    normal_tensor(rng, shape, (2.0 / fan_in as f64).sqrt())
}
