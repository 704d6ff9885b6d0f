//! Counter-mode uniform draws.
//!
//! Every randomized step addresses its draws by `(seed, stream, index)`, so
//! the `u` attached to a record depends only on the record's position and
//! never on evaluation order.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream identifiers used across the crate.
pub mod streams {
    pub const CALIBRATION_SCORES: u64 = 1;
    pub const CALIBRATION_BASELINE: u64 = 2;
    pub const PREDICTION: u64 = 3;
    pub const COVERAGE: u64 = 4;
}

/// Addressable sequence of `Uniform[0, 1)` draws.
#[derive(Debug, Clone)]
pub struct CounterUniform {
    rng: ChaCha8Rng,
}

impl CounterUniform {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    /// The `index`-th draw of the stream.
    pub fn at(&mut self, index: u64) -> f64 {
        // One u64 per draw; word position counts 32-bit words.
        self.rng.set_word_pos(u128::from(index) * 2);
        unit_from_bits(self.rng.next_u64())
    }

    /// The first `n` draws.
    pub fn take(&mut self, n: usize) -> Vec<f64> {
        (0..n as u64).map(|i| self.at(i)).collect()
    }
}

/// Mixes `tag` into `seed` (SplitMix64 finalizer) to get independent
/// sub-seeds for the parts of a larger run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit_from_bits(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
