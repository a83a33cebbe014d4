//! Counter-addressed random streams.
//!
//! Every draw is located by `(seed, purpose, particle_id, step_index)`: the
//! seed and purpose select a ChaCha8 key, the particle id selects the ChaCha
//! stream, and the step index selects a block offset within that stream. A
//! particle's draws therefore never depend on how many other particles exist
//! or on which worker thread happens to step it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Word offset reserved per step index (2^24 32-bit words).
const STEP_SHIFT: u32 = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Injection,
    Brownian,
    Recirculation,
    Bits,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Injection => 0x11,
            Purpose::Brownian => 0x22,
            Purpose::Recirculation => 0x33,
            Purpose::Bits => 0x44,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ label.wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Random stream owned by one particle for one purpose.
#[derive(Clone)]
pub struct ParticleStream {
    rng: ChaCha8Rng,
}

impl ParticleStream {
    pub fn new(seed: u64, purpose: Purpose, particle_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, purpose.tag()));
        rng.set_stream(particle_id);
        Self { rng }
    }

    /// Positions the stream at the block reserved for `step` and returns it.
    pub fn at(&mut self, step: u64) -> &mut ChaCha8Rng {
        self.rng.set_word_pos(u128::from(step) << STEP_SHIFT);
        &mut self.rng
    }

    pub fn normals3(&mut self, step: u64) -> [f64; 3] {
        let rng = self.at(step);
        std::array::from_fn(|_| StandardNormal.sample(rng))
    }
}
