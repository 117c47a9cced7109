//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream keyed by the
//! run seed and a fixed purpose id, so the draws of one purpose never shift
//! when another purpose consumes more or fewer numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose ids for the independent streams derived from one seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Initialization = 1,
    Subsampling = 2,
    Simulation = 3,
    Amputation = 4,
    Heldout = 5,
    Mechanism = 6,
}

pub fn stream(seed: u64, purpose: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}
