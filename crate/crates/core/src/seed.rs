//! Seed derivation for independent, schedule-free random streams.
//!
//! Every consumer of randomness asks for a stream keyed by
//! `(global seed, domain, index)`. Streams never depend on the order in
//! which users are visited, so parallel and sequential runs agree bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keeping streams for different consumers apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    ClusterInit,
    Restart,
    RatingSurprise,
    TemporalSurprise,
    SynthUser,
    SynthLayout,
    SynthEvents,
    PlotDraws,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::ClusterInit => 0x01,
            Domain::Restart => 0x02,
            Domain::RatingSurprise => 0x10,
            Domain::TemporalSurprise => 0x11,
            Domain::SynthUser => 0x20,
            Domain::SynthLayout => 0x21,
            Domain::SynthEvents => 0x22,
            Domain::PlotDraws => 0x30,
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    mix64(mix64(seed) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Random stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: Domain, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, domain.tag()));
    rng.set_stream(index);
    rng
}
