//! Deterministic, splittable pseudo-random number generation.
//!
//! Every stochastic component of the pipeline draws from an [`Rng`] derived
//! from the run seed by a chain of labeled [`Rng::split`] calls, so results
//! are reproducible regardless of evaluation order and independent streams
//! never share state.

/// Splitmix64 mixing function: the core bijective finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based splittable generator built on splitmix64.
///
/// `state` advances by a per-stream odd `gamma` on each draw; `split`
/// produces a child stream whose state and gamma are both derived from the
/// parent's position and the label, so parent and child sequences are
/// decorrelated and label order does not matter.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    gamma: u64,
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng { state: mix(seed.wrapping_add(GOLDEN_GAMMA)), gamma: GOLDEN_GAMMA }
    }

    /// Derive an independent child stream keyed by `label`.
    ///
    /// Splitting does not advance or otherwise perturb `self`, so the set of
    /// children obtained from one parent depends only on their labels.
    pub fn split(&self, label: u64) -> Rng {
        let base = mix(self.state ^ mix(label.wrapping_add(GOLDEN_GAMMA)));
        // Force the child gamma odd so the counter visits all 2^64 states.
        let gamma = mix(base.wrapping_add(GOLDEN_GAMMA)) | 1;
        Rng { state: mix(base), gamma }
    }

    /// Convenience: split on a string label (hashed with splitmix64 over bytes).
    pub fn split_str(&self, label: &str) -> Rng {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for &b in label.as_bytes() {
            h = mix(h ^ b as u64);
        }
        self.split(h)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(self.gamma);
        mix(self.state)
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform float in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        // Reject u1 == 0 so the log is finite.
        let mut u1 = self.uniform();
        while u1 <= 0.0 {
            u1 = self.uniform();
        }
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in [0, n) via 128-bit multiply (Lemire reduction,
    /// without the rejection step; bias is negligible for n << 2^64).
    pub fn range(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.range(i + 1);
            xs.swap(i, j);
        }
    }

    /// Sample `k` distinct indices from [0, n) without replacement.
    /// Requires k <= n.
    pub fn sample_without_replacement(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates: the first k slots end up uniform.
        for i in 0..k {
            let j = i + self.range(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    /// Draw an index from an (unnormalized, non-negative) weight vector.
    pub fn categorical(&mut self, weights: &[f64]) -> Option<usize> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return None;
        }
        let mut target = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            target -= w;
            if target < 0.0 {
                return Some(i);
            }
        }
        // Floating-point slack: fall back to the last positive weight.
        weights.iter().rposition(|&w| w > 0.0)
    }
}
