//! Seeded random streams.
//!
//! Every source of randomness is addressed by a [`StreamKey`]: a master seed
//! plus a path of integer coordinates (level, role, repetition, ...). The key
//! is hashed into the seed of an independent xoshiro256++ generator, so adding
//! a new level or repetition never shifts the draws seen by an existing one.

use rand::{RngCore, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Stream = Xoshiro256PlusPlus;

const MAX_DEPTH: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    seed: u64,
    path: [u64; MAX_DEPTH],
    depth: usize,
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        StreamKey { seed, path: [0; MAX_DEPTH], depth: 0 }
    }

    /// Key of the sub-stream at coordinate `index` below this one.
    ///
    /// Panics when nested deeper than six levels.
    pub fn child(&self, index: u64) -> Self {
        assert!(self.depth < MAX_DEPTH, "stream key nested too deeply");
        let mut next = *self;
        next.path[self.depth] = index;
        next.depth += 1;
        next
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path[..self.depth]
    }

    pub fn stream(&self) -> Stream {
        let mut h = splitmix(self.seed ^ 0x6a09_e667_f3bc_c909);
        for (i, &p) in self.path().iter().enumerate() {
            h = splitmix(h ^ splitmix(p.wrapping_add((i as u64 + 1) << 56)));
        }
        Stream::seed_from_u64(h)
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Source of standard Gaussian increments for the Euler kernels.
pub trait NoiseSource {
    fn standard_normal(&mut self) -> f64;
}

impl<R: RngCore + ?Sized> NoiseSource for R {
    #[inline]
    fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(self)
    }
}

/// Replays a fixed list of Gaussian draws, counting how many were consumed.
///
/// Panics when more draws are requested than were supplied.
#[derive(Debug, Clone)]
pub struct FixedNoise {
    draws: Vec<f64>,
    consumed: usize,
}

impl FixedNoise {
    pub fn new(draws: impl Into<Vec<f64>>) -> Self {
        FixedNoise { draws: draws.into(), consumed: 0 }
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }
}

impl NoiseSource for FixedNoise {
    fn standard_normal(&mut self) -> f64 {
        let xi = self.draws[self.consumed];
        self.consumed += 1;
        xi
    }
}
