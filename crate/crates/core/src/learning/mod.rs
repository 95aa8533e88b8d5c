//! Supervised-learning substrate shared by every trainer: a small
//! convolutional classifier with hand-written backpropagation, softmax and
//! cross-entropy primitives, an SGD/Adam optimizer and a finite-difference
//! gradient checker.
//!
//! Everything is generic over [`Scalar`] so the same code trains in `f32`
//! and is verified in `f64`.

mod classifier;
mod gradcheck;
mod loss;
mod optim;
mod params;

pub use classifier::{
    Architecture, Classifier, ConvSpec, Encoder, EncoderCache, ForwardCache, Role,
};
pub use gradcheck::{finite_difference_gradcheck, GradCheckReport};
pub use loss::{
    cross_entropy, entropy, log_softmax, soft_cross_entropy_batch, softmax, softmax_rows,
    BatchLoss,
};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{ParamSet, Scalar};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG for a named stream under a run seed.
///
/// Streams are derived from `(seed, label)` so adding or removing one
/// consumer never perturbs another.
pub fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label.as_bytes()));
    rng
}

/// Per-sample RNG stream: depends only on `(seed, id, label)`, so results
/// do not depend on processing order or worker count.
pub fn sample_rng(seed: u64, id: u64, label: &str) -> ChaCha8Rng {
    stream_rng(splitmix64(seed ^ splitmix64(id)), label)
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}
