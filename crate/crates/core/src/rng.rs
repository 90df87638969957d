//! Counter-based pseudo-random streams.
//!
//! Every draw is a pure function of `(key, counter)`:
//!
//! ```text
//! z = key + (counter + 1) * 0x9E37_79B9_7F4A_7C15          (wrapping)
//! z = (z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9
//! z = (z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB
//! out = z ^ (z >> 31)
//! ```
//!
//! which is the SplitMix64 output function evaluated at an explicit position.
//! Stream keys are derived by folding labelled components (seed, patient index,
//! pathology index, purpose tag) through the same mixer, so a value never
//! depends on how many draws other streams have made. Generation order and
//! thread count therefore cannot change results.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const MIX_1: u64 = 0xBF58_476D_1CE4_E5B9;
const MIX_2: u64 = 0x94D0_49BB_1331_11EB;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_2);
    z ^ (z >> 31)
}

/// FNV-1a over raw bytes. Used to turn string identifiers into key material.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Purpose tags keep streams for different uses disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Demographics = 1,
    Label = 2,
    Ambiguity = 3,
    Render = 4,
    Noise = 5,
    Annotation = 6,
    View = 7,
    Init = 8,
    Shuffle = 9,
    Sweep = 10,
    Split = 11,
}

/// A keyed stream with an explicit position.
#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Self {
            key: mix64(seed ^ GOLDEN_GAMMA),
            counter: 0,
        }
    }

    /// Derives an independent child stream. `derive` is order-sensitive:
    /// `s.derive(a).derive(b) != s.derive(b).derive(a)` in general.
    pub fn derive(&self, component: u64) -> Self {
        Self {
            key: mix64(self.key ^ mix64(component.wrapping_add(GOLDEN_GAMMA))),
            counter: 0,
        }
    }

    pub fn keyed(seed: u64, purpose: Purpose, components: &[u64]) -> Self {
        components
            .iter()
            .fold(Stream::new(seed).derive(purpose as u64), |s, &c| s.derive(c))
    }

    /// Value at an absolute position, without advancing.
    #[inline]
    pub fn at(&self, counter: u64) -> u64 {
        mix64(
            self.key
                .wrapping_add(counter.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)),
        )
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let v = self.at(self.counter);
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1) with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box-Muller (one value per two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Unbiased integer in [0, n) by rejection. `n` must be > 0.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
