//! Seeded pseudo-randomness for reproducible phantoms, init, and training.
//!
//! All randomness in the crate flows through [`Rng`], a xoshiro256++
//! generator seeded through SplitMix64. The implementation is self-contained
//! so that fixtures and training runs regenerate bit-identically on any
//! platform, independent of external crate versions.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// xoshiro256++ generator with a SplitMix64-expanded seed.
#[derive(Clone, Debug)]
pub struct Rng {
    s: [u64; 4],
    /// Second deviate of the last Box-Muller pair, returned by the next
    /// `normal()` call before fresh uniforms are drawn.
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s, spare_normal: None }
    }

    /// Seed for substream `index` of a generator family rooted at `base`.
    ///
    /// Distinct indices give statistically independent streams, so one base
    /// seed can drive many phantoms or components without draw-order
    /// coupling between them.
    pub fn derive_stream(base: u64, index: u64) -> u64 {
        let mut sm = base ^ index.wrapping_add(1).wrapping_mul(GOLDEN);
        splitmix64(&mut sm)
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0]
            .wrapping_add(s[3])
            .rotate_left(23)
            .wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.next_f64() * (hi - lo)
    }

    /// Uniform in `0..n`. Modulo bias is below 2^-50 for the n used here
    /// (action counts, buffer sizes) and is deliberately ignored.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is empty");
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal deviate via Box-Muller, pair-cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u keeps the log argument strictly positive.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }
}
