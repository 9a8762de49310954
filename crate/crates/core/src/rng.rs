//! Counter-based random streams.
//!
//! Every draw is a pure function of `(seed, particle, step, tag)`, so a
//! simulation produces the same numbers whatever order the particles are
//! visited in and however many threads do the visiting.

use rand::Rng;
use rand_core::RngCore;
use rand_distr::{Distribution, StandardNormal};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 output function.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Purpose tags keep the normal increments, Bernoulli stops and initial
/// resampling on disjoint streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamTag {
    Increment = 1,
    Bernoulli = 2,
    Resample = 3,
    Search = 4,
}

/// A short SplitMix64 stream keyed by a counter tuple.
#[derive(Debug, Clone)]
pub struct CounterRng {
    state: u64,
}

impl CounterRng {
    #[inline]
    pub fn new(seed: u64, particle: u64, step: u64, tag: StreamTag) -> Self {
        let key = mix(seed ^ GOLDEN)
            ^ mix(particle
                .wrapping_mul(0xd6e8_feb8_6659_fd93)
                .wrapping_add(tag as u64))
            ^ mix(step.wrapping_mul(0xa076_1d64_78bd_642f) ^ 0x5851_f42d_4c95_7f2d);
        Self { state: mix(key) }
    }

    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        self.random::<f64>()
    }
}

impl RngCore for CounterRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// One standard normal draw for `(seed, particle, step)`.
#[inline]
pub fn normal_increment(seed: u64, particle: u64, step: u64) -> f64 {
    CounterRng::new(seed, particle, step, StreamTag::Increment).standard_normal()
}
