//! Named random substreams derived from a single master seed.
//!
//! Every random draw in the crate goes through one of these streams so that
//! results depend only on `(master_seed, stream, indices)` and never on
//! scheduling order across worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent purposes a seed can be drawn for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Scene,
    Pool,
    Episode,
    Baseline,
    Init,
    Model,
    Shuffle,
    Eval,
    Bench,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Scene => 0x5343_454e,
            Stream::Pool => 0x504f_4f4c,
            Stream::Episode => 0x4550_4953,
            Stream::Baseline => 0x4241_5345,
            Stream::Init => 0x494e_4954,
            Stream::Model => 0x4d4f_4445,
            Stream::Shuffle => 0x5348_5546,
            Stream::Eval => 0x4556_414c,
            Stream::Bench => 0x4245_4e43,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed for `stream` at position `indices` under `master`.
pub fn derive(master: u64, stream: Stream, indices: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ splitmix64(stream.tag()));
    for &i in indices {
        h = splitmix64(h ^ splitmix64(i.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    h
}

pub fn rng_from(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

pub fn stream_rng(master: u64, stream: Stream, indices: &[u64]) -> Rng {
    rng_from(derive(master, stream, indices))
}
