//! Reproducible random streams.
//!
//! Every experiment has one master seed. A measurement campaign inside a run
//! gets its own ChaCha8 stream: the generator is seeded with
//! `splitmix64(master ^ splitmix64(run_id))` through `seed_from_u64`, and the
//! ChaCha stream id is `fnv1a64(campaign_label) ⊕ role`. Both mixing functions
//! are fixed integer arithmetic, so the draws are identical on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Role tag inside a campaign: parameter draws and outcome draws never share
/// a stream, so changing K does not shift the prepared states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamRole {
    Params = 0,
    Outcomes = 1,
    Aux = 2,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn stream(master_seed: u64, run_id: u64, label: &str, role: StreamRole) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(master_seed ^ splitmix64(run_id)));
    rng.set_stream(fnv1a64(label) ^ role as u64);
    rng
}
