//! Jamming power levels: an ordered partition of the attack budget range.
//!
//! Level 0 is the no-attack class; level `i >= 1` covers budgets in
//! `[eps_{i-1}, eps_i]` with strictly increasing boundaries.

use crate::{DefenseError, Result};
use rand::Rng;
use rome_channel::psr_to_epsilon;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLevelSet {
    boundaries: Vec<f64>,
}

impl PowerLevelSet {
    pub fn from_boundaries(boundaries: Vec<f64>) -> Result<Self> {
        if boundaries.len() < 2 {
            return Err(DefenseError::InvalidLevels(
                "need at least two boundaries (N >= 2)".into(),
            ));
        }
        if boundaries[0] <= 0.0 {
            return Err(DefenseError::InvalidLevels(
                "lowest boundary must be positive".into(),
            ));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DefenseError::InvalidLevels(format!(
                "boundaries must be strictly increasing, got {boundaries:?}"
            )));
        }
        Ok(Self { boundaries })
    }

    /// `n` levels over a PSR range in dB: level 0 is clean, the attack
    /// range splits into `n - 1` equal dB intervals.
    pub fn from_psr_range(psr_lo_db: f64, psr_hi_db: f64, n: usize, power: f64) -> Result<Self> {
        if n < 2 || psr_hi_db <= psr_lo_db {
            return Err(DefenseError::InvalidLevels(format!(
                "need n >= 2 and an increasing PSR range, got n={n}, [{psr_lo_db}, {psr_hi_db}]"
            )));
        }
        let steps = n - 1;
        let boundaries = (0..n)
            .map(|i| {
                let psr = psr_lo_db + (psr_hi_db - psr_lo_db) * i as f64 / steps as f64;
                psr_to_epsilon(psr, power)
            })
            .collect();
        Self::from_boundaries(boundaries)
    }

    /// Number of levels, including the no-attack level.
    pub fn count(&self) -> usize {
        self.boundaries.len()
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn max_epsilon(&self) -> f64 {
        *self.boundaries.last().expect("non-empty")
    }

    /// Budget interval of a level: `(0, 0)` for the clean level.
    pub fn interval(&self, level: usize) -> Result<(f64, f64)> {
        if level >= self.count() {
            return Err(DefenseError::InvalidLevels(format!(
                "level {level} out of range for {} levels",
                self.count()
            )));
        }
        if level == 0 {
            Ok((0.0, 0.0))
        } else {
            Ok((self.boundaries[level - 1], self.boundaries[level]))
        }
    }

    /// Level containing a budget; budgets below the lowest boundary fall
    /// into level 1, budgets above the highest into the top level.
    pub fn level_of(&self, eps: f64) -> usize {
        if eps <= 0.0 {
            return 0;
        }
        for (i, &b) in self.boundaries.iter().enumerate().skip(1) {
            if eps <= b {
                return i;
            }
        }
        self.count() - 1
    }

    /// Uniform budget inside a level's interval (0 for the clean level).
    pub fn sample_epsilon(&self, level: usize, rng: &mut impl Rng) -> Result<f64> {
        let (lo, hi) = self.interval(level)?;
        if hi <= lo {
            Ok(lo)
        } else {
            Ok(rng.gen_range(lo..hi))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psr_grid_construction() {
        let levels = PowerLevelSet::from_psr_range(-15.0, -1.0, 4, 1.0).unwrap();
        assert_eq!(levels.count(), 4);
        let b = levels.boundaries();
        assert!((b[0] - psr_to_epsilon(-15.0, 1.0)).abs() < 1e-12);
        assert!((b[3] - psr_to_epsilon(-1.0, 1.0)).abs() < 1e-12);
        assert!(b.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn level_lookup_and_sampling() {
        let levels = PowerLevelSet::from_boundaries(vec![0.1, 0.2, 0.4, 0.8]).unwrap();
        assert_eq!(levels.level_of(0.0), 0);
        assert_eq!(levels.level_of(0.15), 1);
        assert_eq!(levels.level_of(0.3), 2);
        assert_eq!(levels.level_of(0.79), 3);
        assert_eq!(levels.level_of(5.0), 3);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for level in 0..4 {
            let (lo, hi) = levels.interval(level).unwrap();
            for _ in 0..50 {
                let e = levels.sample_epsilon(level, &mut rng).unwrap();
                assert!(e >= lo && e <= hi.max(lo));
            }
        }
    }

    #[test]
    fn rejects_degenerate_boundaries() {
        assert!(PowerLevelSet::from_boundaries(vec![0.5]).is_err());
        assert!(PowerLevelSet::from_boundaries(vec![0.5, 0.5]).is_err());
        assert!(PowerLevelSet::from_boundaries(vec![-0.1, 0.5]).is_err());
        assert!(PowerLevelSet::from_psr_range(-1.0, -15.0, 4, 1.0).is_err());
    }
}
