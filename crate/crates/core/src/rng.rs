//! Seeded random streams. Every consumer draws from its own named
//! substream of one experiment seed, so adding draws in one place never
//! shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data,
    NoiseWeak,
    NoiseStrong,
    Init,
    Batch,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Data => 1,
            Stream::NoiseWeak => 2,
            Stream::NoiseStrong => 3,
            Stream::Init => 4,
            Stream::Batch => 5,
        }
    }
}

pub fn substream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
