//! Counter-based random number generation.
//!
//! Every stream is a SplitMix64 counter sequence: the n-th output is
//! `mix(key ^ n * GAMMA)` where `mix` is the SplitMix64 finaliser. Substreams
//! derived with [`Rng::derive`] rehash the key with a tag, so noise can be
//! keyed to stable identifiers (dataset index, point id, diffusion step,
//! resampling iteration, ...) and is independent of evaluation order. This is
//! what makes sampler runs reproducible and permutation-stable.

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;
const SEED_SALT: u64 = 0x5851_f42d_4c95_7f2d;

/// SplitMix64 finaliser.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A seedable, splittable, counter-based generator.
#[derive(Clone, Debug)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { key: mix(seed ^ SEED_SALT), counter: 0 }
    }

    /// Derive an independent substream. Tag order matters:
    /// `r.derive(a).derive(b)` and `r.derive(b).derive(a)` differ.
    pub fn derive(&self, tag: u64) -> Rng {
        Rng { key: mix(self.key.rotate_left(17) ^ mix(tag.wrapping_add(GAMMA))), counter: 0 }
    }

    /// Derive a substream from several tags at once.
    pub fn derive_all(&self, tags: &[u64]) -> Rng {
        let mut r = self.clone();
        for &t in tags {
            r = r.derive(t);
        }
        r
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key ^ self.counter.wrapping_mul(GAMMA))
    }

    /// Uniform draw in the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw via Box-Muller; consumes exactly two uniforms.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform index in 0..n (n > 0), by 128-bit multiply.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// A uniformly random permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}

/// Stable tag for keying a noise stream to a floating-point payload.
pub fn bits_tag(x: f64) -> u64 {
    mix(x.to_bits().wrapping_add(GAMMA))
}
