//! SplitMix64 stream with Box–Muller Gaussians.
//!
//! Draw sequences are fully specified so that fixtures and perturbation sets
//! reproduce bit-for-bit in any language:
//!
//! * `next_u64`: add `0x9E3779B97F4A7C15` to the state, then mix with
//!   multipliers `0xBF58476D1CE4E5B9`, `0x94D049BB133111EB` and shifts 30, 27, 31.
//! * `next_f64`: `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
//! * `next_gaussian`: Box–Muller on `u1 = 1 - next_f64()` (in `(0, 1]`) then
//!   `u2 = next_f64()`; yields `z0` and caches `z1` for the following call.
//!   Uniform draws do not touch the cached value.

#[derive(Debug, Clone)]
pub struct Prng {
    state: u64,
    spare: Option<f64>,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed, spare: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z1) = self.spare.take() {
            return z1;
        }
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// `true` with probability `p`.
    pub fn next_bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform index in `0..n`.
    pub fn next_index(&mut self, n: usize) -> usize {
        ((self.next_f64() * n as f64) as usize).min(n.saturating_sub(1))
    }
}
