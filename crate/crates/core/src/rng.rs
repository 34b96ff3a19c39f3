//! Counter-based random number streams.
//!
//! Every stochastic operation in this crate takes an [`RngStream`], a value
//! identified by `(master_seed, stream_id)`. Equal identifiers reproduce the
//! same draw sequence regardless of thread schedule, and distinct stream ids
//! give independent-quality streams, so parallel repetitions stay
//! run-to-run deterministic.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
        }
    }

    /// Derive a child stream. Mixing rather than offsetting keeps substreams
    /// of different parents from colliding.
    pub fn substream(&self, tag: u64) -> RngStream {
        RngStream {
            master_seed: self.master_seed,
            stream_id: splitmix64(self.stream_id ^ splitmix64(tag.wrapping_add(0x517c_c1b7_2722_0a95))),
        }
    }

    /// Instantiate the generator for this stream.
    pub fn rng(&self) -> ChaCha12Rng {
        let mut seed = [0u8; 32];
        let mut s = splitmix64(self.master_seed);
        let words = [
            splitmix64(s),
            {
                s = splitmix64(s ^ self.stream_id);
                s
            },
            splitmix64(s.wrapping_add(self.stream_id)),
            splitmix64(self.stream_id),
        ];
        for (i, w) in words.iter().enumerate() {
            seed[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        ChaCha12Rng::from_seed(seed)
    }
}
