//! Progressive masked image modeling: the masking-ratio schedule and random
//! patch masks.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskingMode {
    /// Linear ramp from `gamma_start` to `gamma_end`.
    Progressive,
    /// Fixed at `gamma_end`.
    Constant,
    /// No masking.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingSchedule {
    pub gamma_start: f64,
    pub gamma_end: f64,
    pub total_steps: usize,
    pub mode: MaskingMode,
}

impl MaskingSchedule {
    pub fn progressive(total_steps: usize) -> Self {
        Self {
            gamma_start: 0.01,
            gamma_end: 0.25,
            total_steps,
            mode: MaskingMode::Progressive,
        }
    }

    /// `γ(t) = γ_start + (γ_end - γ_start) · min(t / T, 1)`.
    pub fn gamma(&self, t: usize) -> f64 {
        match self.mode {
            MaskingMode::None => 0.0,
            MaskingMode::Constant => self.gamma_end,
            MaskingMode::Progressive => {
                if t == 0 {
                    self.gamma_start
                } else if t >= self.total_steps {
                    self.gamma_end
                } else {
                    let frac = t as f64 / self.total_steps as f64;
                    self.gamma_start + (self.gamma_end - self.gamma_start) * frac
                }
            }
        }
    }
}

/// Number of masked patches: `γ·n` rounded half up.
pub fn masked_count(n_patches: usize, gamma: f64) -> usize {
    ((gamma * n_patches as f64 + 0.5).floor() as usize).min(n_patches)
}

/// Patch map with exactly [`masked_count`] positions set, chosen uniformly
/// without replacement.
pub fn sample_mask<R: Rng>(n_patches: usize, gamma: f64, rng: &mut R) -> Vec<bool> {
    let k = masked_count(n_patches, gamma.clamp(0.0, 1.0));
    let mut out = vec![false; n_patches];
    for i in index::sample(rng, n_patches, k) {
        out[i] = true;
    }
    out
}

/// Independent masks for every image of a batch, concatenated.
pub fn sample_batch_mask<R: Rng>(batch: usize, n_patches: usize, gamma: f64, rng: &mut R) -> Vec<bool> {
    (0..batch).flat_map(|_| sample_mask(n_patches, gamma, rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn endpoints_exact() {
        let s = MaskingSchedule::progressive(1000);
        assert_eq!(s.gamma(0), 0.01);
        assert_eq!(s.gamma(1000), 0.25);
        assert_eq!(s.gamma(5000), 0.25);
        assert!((s.gamma(500) - 0.13).abs() < 1e-15);
    }

    #[test]
    fn modes() {
        let mut s = MaskingSchedule::progressive(10);
        s.mode = MaskingMode::Constant;
        assert_eq!(s.gamma(0), 0.25);
        s.mode = MaskingMode::None;
        assert_eq!(s.gamma(7), 0.0);
    }

    #[test]
    fn mask_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mask(64, 0.0, &mut rng).iter().all(|&b| !b));
        assert!(sample_mask(64, 1.0, &mut rng).iter().all(|&b| b));
        assert_eq!(masked_count(64, 0.25), 16);
        // 0.5 rounds up.
        assert_eq!(masked_count(2, 0.25), 1);
        assert_eq!(sample_mask(64, 0.13, &mut rng).iter().filter(|&&b| b).count(), 8);
    }
}
