//! Deterministic random number generation for the simulation layer.
//!
//! Every stochastic component draws from its own stream derived from the
//! experiment master seed, so two runs with the same seed are bit-identical
//! regardless of scheduling. The generator is xoshiro256++ seeded through
//! splitmix64 (the reference seeding procedure), written out here so the
//! sequence is pinned by this crate rather than by an external crate version.

/// splitmix64 step; used to expand seeds and derive independent streams.
#[inline]
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// xoshiro256++ generator.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        let mut sm = seed;
        let mut s = [0u64; 4];
        for w in &mut s {
            *w = splitmix64(&mut sm);
        }
        // All-zero state is invalid for xoshiro; splitmix64 cannot produce
        // four zero words from any seed, but keep the guard explicit.
        if s == [0; 4] {
            s[0] = 1;
        }
        Rng { s }
    }

    /// Derive an independent stream for a named subsystem.
    pub fn derive(master: u64, stream: u64) -> Self {
        let mut sm = master ^ stream.wrapping_mul(0xa076_1d64_78bd_642f);
        let mixed = splitmix64(&mut sm);
        Self::from_seed(mixed ^ stream)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let result = (self.s[0].wrapping_add(self.s[3]))
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    #[inline]
    pub fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    /// Uniform f64 in [0, 1) with 53-bit resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound) by rejection of the biased region.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0);
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Bernoulli trial.
    #[inline]
    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Geometric gap (>= 1 slots) to the next success of a Bernoulli(p)
    /// process. Used for slot-skipping in the detector loops.
    #[inline]
    pub fn geometric_gap(&mut self, p: f64) -> u64 {
        debug_assert!(p > 0.0 && p < 1.0);
        let u = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let g = (u.ln() / (1.0 - p).ln()).ceil();
        if g < 1.0 {
            1
        } else if g >= 9.0e18 {
            u64::MAX / 4
        } else {
            g as u64
        }
    }

    /// Fisher-Yates shuffle of an index permutation.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

/// Stream labels for [`Rng::derive`].
pub mod streams {
    pub const ALICE_QRNG: u64 = 0x01;
    pub const BOB_DATA_DET: u64 = 0x02;
    pub const BOB_MON_DET: u64 = 0x03;
    pub const EC_SHUFFLE: u64 = 0x04;
    pub const PA_SEED: u64 = 0x05;
    pub const AUTH_POOL: u64 = 0x06;
    pub const ALIGN_PATTERN: u64 = 0x07;
}
