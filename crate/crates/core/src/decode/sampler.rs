use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::tensors::TokenId;

/// Seeded token sampler.
///
/// The generator is ChaCha20 seeded through `seed_from_u64`. Each draw takes
/// one `u64`, keeps its top 53 bits as `u = bits * 2^-53` in `[0, 1)` and
/// returns the first token (in id order) whose cumulative probability
/// exceeds `u`. Zero-probability tokens are never returned.
#[derive(Debug, Clone)]
pub struct TokenSampler {
    rng: ChaCha20Rng,
}

impl TokenSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn next_unit(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Draw from `probs` (non-negative, summing to ~1, at least one positive).
    pub fn sample(&mut self, probs: &[f64]) -> TokenId {
        let u = self.next_unit();
        let mut acc = 0.0;
        let mut last = None;
        for (i, &p) in probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = Some(i);
            if u < acc {
                return i as TokenId;
            }
        }
        // Rounding left `u` above the running sum: take the last live token.
        last.expect("distribution has positive mass") as TokenId
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let mut a = TokenSampler::new(7);
        let mut b = TokenSampler::new(7);
        let xs: Vec<f64> = (0..20).map(|_| a.next_unit()).collect();
        let ys: Vec<f64> = (0..20).map(|_| b.next_unit()).collect();
        assert_eq!(xs, ys);
        assert!(xs.iter().all(|u| (0.0..1.0).contains(u)));
        assert_ne!(TokenSampler::new(8).next_unit(), xs[0]);
    }

    #[test]
    fn never_picks_zero_mass() {
        let mut s = TokenSampler::new(1);
        for _ in 0..500 {
            let t = s.sample(&[0.0, 0.3, 0.0, 0.7, 0.0]);
            assert!(t == 1 || t == 3);
        }
        assert_eq!(s.sample(&[0.0, 1.0]), 1);
    }

    #[test]
    fn frequencies_track_probabilities() {
        let mut s = TokenSampler::new(99);
        let probs = [0.1, 0.6, 0.3];
        let mut counts = [0usize; 3];
        let n = 20_000;
        for _ in 0..n {
            counts[s.sample(&probs) as usize] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.02);
        }
    }
}
