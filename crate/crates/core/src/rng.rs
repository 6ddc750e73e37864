//! Deterministic pseudo-randomness.
//!
//! Every stochastic component in this workspace draws from [`Rng`], a
//! xoshiro256** generator seeded through SplitMix64. The update rules are
//! spelled out below so a reimplementation in another language can reproduce
//! traces bit for bit:
//!
//! Seeding (SplitMix64, run four times from the user seed):
//! ```text
//! z  = (state += 0x9E3779B97F4A7C15)
//! z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
//! z ^= z >> 27; z *= 0x94D049BB133111EB
//! z ^= z >> 31
//! ```
//!
//! Stream (xoshiro256**):
//! ```text
//! out = rotl(s1 * 5, 7) * 9
//! t = s1 << 17
//! s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3; s2 ^= t; s3 = rotl(s3, 45)
//! ```
//!
//! Derived draws:
//! - `uniform()`   : `(out >> 11) * 2^-53`, in `[0, 1)`.
//! - `normal()`    : Box–Muller, `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`;
//!   each call consumes exactly two uniforms and the sine branch is unused.
//! - `below(n)`    : `out % n` (desk-scale index draws; modulo bias is
//!   irrelevant at the n involved here and keeps the rule trivial to port).

#[derive(Debug, Clone)]
pub struct Rng {
    state: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut state = [0u64; 4];
        for slot in &mut state {
            *slot = split_mix64(&mut sm);
        }
        Rng { state }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let out = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        out
    }

    /// Uniform draw in `[0, 1)` with 53 bits of mantissa.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw (Box–Muller, cosine branch).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Index draw in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    pub fn fill_normal(&mut self, buf: &mut [f64]) {
        for v in buf {
            *v = self.normal();
        }
    }

    pub fn fill_uniform_in(&mut self, buf: &mut [f64], lo: f64, hi: f64) {
        for v in buf {
            *v = self.uniform_in(lo, hi);
        }
    }
}

fn split_mix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let mut a = Rng::new(1);
        let mut b = Rng::new(2);
        let same = (0..16).filter(|_| a.next_u64() == b.next_u64()).count();
        assert!(same < 16);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = Rng::new(7);
        for _ in 0..1000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut r = Rng::new(3);
        let n = 20_000;
        let draws: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
