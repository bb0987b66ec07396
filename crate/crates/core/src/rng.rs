//! Seeding scheme.
//!
//! Every random draw in the crate comes from a ChaCha8 generator, which is
//! portable and produces the same stream on every platform. A generator is
//! addressed by `(seed, domain, stream)`:
//!
//! * `seed` is the user-facing 64-bit seed (world seed, training seed, ...).
//! * `domain` separates unrelated consumers of the same seed, so that for
//!   example the pair sampler and the weight initialiser never share draws.
//!   The ChaCha key is `splitmix64(seed ^ domain)`.
//! * `stream` selects one of the 2^64 independent ChaCha streams under that
//!   key. World generation uses one stream per trajectory, training uses one
//!   per epoch, evaluation one per query.
//!
//! Because each substream is independent, work split by stream can run in any
//! order or in parallel and still produce identical results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Consumers of seeds. The numeric values are part of the reproducibility
/// contract and must never change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    WorldLayout = 0x01,
    Trajectory = 0x02,
    Shuffle = 0x03,
    EdgeSplit = 0x04,
    AnchorHoldout = 0x05,
    Init = 0x06,
    Pairs = 0x07,
    EpochOrder = 0x08,
    Queries = 0x09,
    Negatives = 0x0a,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Generator for `(seed, domain, stream)`.
pub fn substream(seed: u64, domain: Domain, stream: u64) -> ChaCha8Rng {
    let key = splitmix64(seed ^ (domain as u64).wrapping_mul(0xd6e8_feb8_6659_fd93));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = substream(42, Domain::Trajectory, 3).random();
        let b: u64 = substream(42, Domain::Trajectory, 3).random();
        let c: u64 = substream(42, Domain::Trajectory, 4).random();
        let d: u64 = substream(42, Domain::Pairs, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn chacha_stream_is_pinned() {
        // Guards against silent changes in the upstream generator.
        let mut rng = substream(0, Domain::WorldLayout, 0);
        let first: u64 = rng.random();
        let mut again = substream(0, Domain::WorldLayout, 0);
        assert_eq!(first, again.random::<u64>());
        assert_eq!(first, 13158215503020461101);
    }
}
