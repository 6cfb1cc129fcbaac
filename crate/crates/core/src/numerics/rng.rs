//! Counter-based random number generator.
//!
//! The stream is fully specified so any implementation, in any language, can
//! reproduce it from a seed:
//!
//! * `mix(z)` is the splitmix64 finalizer:
//!   `z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9`,
//!   `z = (z ^ (z >> 27)) * 0x94D049BB133111EB`,
//!   `z ^ (z >> 31)` (all arithmetic mod 2^64).
//! * Draw n (1-based counter): `next_u64 = mix(seed + n * 0x9E3779B97F4A7C15)`.
//! * `next_f64 = (next_u64 >> 11) * 2^-53`, uniform in [0, 1).
//! * `next_gaussian` draws u1 = 1 - next_f64 (in (0, 1]), u2 = next_f64 and
//!   returns `sqrt(-2 ln u1) * cos(2 pi u2)`. No second sample is cached.
//! * `next_range(n) = next_u64 % n`.
//! * `derive(stream)` spawns an independent generator with
//!   `seed' = mix(seed ^ mix(stream * 0x9E3779B97F4A7C15 + 0x6A09E667F3BCC909))`
//!   and counter reset to zero.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    counter: u64,
}

const GOLDEN: u64 = 0x9E3779B97F4A7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState { seed, counter: 0 }
    }

    /// Independent substream; used for per-thread or per-item sampling so
    /// results do not depend on evaluation order.
    pub fn derive(&self, stream: u64) -> Self {
        let tweak = mix(stream.wrapping_mul(GOLDEN).wrapping_add(0x6A09E667F3BCC909));
        RngState { seed: mix(self.seed ^ tweak), counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller (cosine branch only).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1], keeps ln finite
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in [0, n). Modulo bias is below 2^-50 for the sizes
    /// used here.
    pub fn next_range(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }
}
