//! Named, serializable random streams.
//!
//! Every source of randomness (data order, dropout, sorting-network masks and
//! noise) draws from its own ChaCha stream derived from one run seed, so a
//! run can be checkpointed and resumed bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Stream ids for the training pipeline.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SORTING: u64 = 3;
    pub const INIT: u64 = 4;
    pub const GENERATOR: u64 = 5;
    pub const BOOTSTRAP: u64 = 6;
}

/// Creates the stream `stream` of the generator keyed by `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Exact position of a ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn capture_restore_continues_sequence() {
        let mut a = stream(7, streams::DROPOUT);
        for _ in 0..13 {
            let _: u32 = a.random();
        }
        let state = RngState::capture(&a);
        let mut b = state.restore();
        for _ in 0..50 {
            assert_eq!(a.random::<u64>(), b.random::<u64>());
        }
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = stream(7, 1);
        let mut b = stream(7, 2);
        assert_ne!(a.random::<u64>(), b.random::<u64>());
    }
}
