//! Seeded RNG streams.
//!
//! Every consumer derives its own ChaCha8 stream from `(seed, stream id)`,
//! so adding a consumer never shifts the numbers another one sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod streams {
    pub const TEACHER_EXTRACTOR: u64 = 1;
    pub const FP_CLASSIFIER: u64 = 2;
    pub const STUDENT: u64 = 3;
    pub const DATA: u64 = 4;
    pub const PROBE: u64 = 5;
    pub const SYNTH: u64 = 6;
    pub const TEACHER_HEAD: u64 = 7;
    pub const BENCH: u64 = 8;
    /// Per-run streams of the EMA simulation start here.
    pub const EMA_BASE: u64 = 1 << 32;
}

pub fn stream(seed: u64, id: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}
