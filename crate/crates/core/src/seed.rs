// SPDX-License-Identifier: Apache-2.0

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent, reproducible stream for one consumer of a user seed.
pub(crate) fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) mod streams {
    pub const SYNTH_PROTOTYPES: u64 = 1;
    pub const SYNTH_PROJECTION_X: u64 = 2;
    pub const SYNTH_PROJECTION_Y: u64 = 3;
    pub const SYNTH_INSTANCES: u64 = 4;
    pub const SYNTH_MASK: u64 = 5;
    pub const ENCODER_X: u64 = 10;
    pub const ENCODER_Y: u64 = 11;
    pub const TRIPLETS: u64 = 20;
    pub const MONITOR: u64 = 21;
    pub const DROPOUT: u64 = 22;
    pub const NULL_SHUFFLE: u64 = 30;
    pub const GRADCHECK: u64 = 40;
}
