//! Deterministic random substreams.
//!
//! Every random draw of a chain is taken from a stream keyed by
//! `(seed, iteration, step, index)`, so results do not depend on the order in
//! which independent updates are executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn substream(seed: u64, iteration: u64, step: u64, index: u64) -> StreamRng {
    let key = mix(mix(mix(seed) ^ iteration) ^ step.rotate_left(17)) ^ index.rotate_left(41);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(key));
    rng.set_stream(index);
    rng
}
