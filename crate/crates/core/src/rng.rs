//! Deterministic RNG stream derivation.
//!
//! Every source of randomness in an experiment is a ChaCha12 stream derived
//! from a root seed plus a domain tag and up to two indices (client, round,
//! class, ...). Streams never alias across domains, so e.g. backend noise
//! draws cannot shift data sampling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Domain tags for derived streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    ModelInit,
    Partition,
    BlobGen,
    MaliciousSelect,
    ClientTrain,
    Poison,
    Mask,
    HeBackend,
    KeyGen,
}

impl Domain {
    fn tag(self) -> u64 {
        match self {
            Domain::ModelInit => 0x01,
            Domain::Partition => 0x02,
            Domain::BlobGen => 0x03,
            Domain::MaliciousSelect => 0x04,
            Domain::ClientTrain => 0x05,
            Domain::Poison => 0x06,
            Domain::Mask => 0x07,
            Domain::HeBackend => 0x08,
            Domain::KeyGen => 0x09,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a ChaCha12 stream from `(seed, domain, a, b)`.
pub fn stream(seed: u64, domain: Domain, a: u64, b: u64) -> ChaCha12Rng {
    let mut s = splitmix(seed ^ splitmix(domain.tag()));
    s = splitmix(s ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    s = splitmix(s ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f));
    ChaCha12Rng::seed_from_u64(s)
}
