//! Named, independent random streams.
//!
//! Every consumer draws from `(seed, stream, index)`; no stream shares state
//! with another, so prior poses and training images stay unpaired even under
//! an identical seed, and results never depend on generation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Prior = 1,
    TrainImages = 2,
    Eval = 3,
    Batches = 4,
    Rotations = 5,
    Init = 6,
    Dropout = 7,
    DiscNoise = 8,
}

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    debug_assert!(index < 1 << 48);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) | index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent_and_replayable() {
        let a: u64 = stream_rng(1, Stream::Prior, 0).gen();
        let b: u64 = stream_rng(1, Stream::TrainImages, 0).gen();
        let c: u64 = stream_rng(1, Stream::Prior, 1).gen();
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, stream_rng(1, Stream::Prior, 0).gen::<u64>());
    }
}
