use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Share of the token budget spent warming up: 375M of 300B tokens.
pub const DEFAULT_WARMUP_RATIO: f64 = 375e6 / 300e9;

/// Linear warmup from 0 to `peak_lr`, then linear decay back to 0 at
/// `total_tokens`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_tokens: u64,
    pub total_tokens: u64,
}

impl Schedule {
    pub fn new(peak_lr: f64, warmup_tokens: u64, total_tokens: u64) -> Result<Self> {
        if !(warmup_tokens > 0 && warmup_tokens < total_tokens) {
            return Err(Error::config(format!(
                "schedule needs 0 < warmup_tokens ({warmup_tokens}) < total_tokens ({total_tokens})"
            )));
        }
        if !(peak_lr >= 0.0 && peak_lr.is_finite()) {
            return Err(Error::config(format!(
                "peak learning rate {peak_lr} is invalid"
            )));
        }
        Ok(Self {
            peak_lr,
            warmup_tokens,
            total_tokens,
        })
    }

    /// Schedule whose warmup keeps [`DEFAULT_WARMUP_RATIO`] of the budget.
    pub fn with_default_warmup(peak_lr: f64, total_tokens: u64) -> Result<Self> {
        let warmup = ((total_tokens as f64 * DEFAULT_WARMUP_RATIO).round() as u64).max(1);
        Self::new(peak_lr, warmup, total_tokens)
    }

    /// Learning rate after `tokens_seen` tokens. Past the end of the budget
    /// the rate is clamped to 0 and a warning is logged.
    pub fn lr_at(&self, tokens_seen: u64) -> f64 {
        if tokens_seen > self.total_tokens {
            log::warn!(
                "tokens_seen {tokens_seen} exceeds schedule total {}; learning rate clamped to 0",
                self.total_tokens
            );
            return 0.0;
        }
        let t = tokens_seen as f64;
        let (w, total) = (self.warmup_tokens as f64, self.total_tokens as f64);
        if t <= w {
            self.peak_lr * t / w
        } else {
            self.peak_lr * (1.0 - (t - w) / (total - w))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let s = Schedule::new(1.0, 375_000_000, 300_000_000_000).unwrap();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(375_000_000), 1.0);
        let mid = s.lr_at(150_000_000_000);
        let expect = 1.0 - (150e9 - 0.375e9) / (300e9 - 0.375e9);
        assert!((mid - expect).abs() < 1e-15);
        assert!((mid - 0.50063).abs() < 1e-5);
        assert_eq!(s.lr_at(300_000_000_000), 0.0);
        assert_eq!(s.lr_at(300_000_000_001), 0.0);
    }

    #[test]
    fn schedule_is_continuous_and_piecewise_linear() {
        let s = Schedule::new(3e-4, 100, 1000).unwrap();
        let mut prev = s.lr_at(0);
        for t in 1..=1000 {
            let lr = s.lr_at(t);
            assert!((lr - prev).abs() <= 3e-4 / 100.0 + 1e-15, "jump at {t}");
            prev = lr;
        }
        // Second differences vanish away from the apex.
        for t in [10u64, 50, 200, 700] {
            let d2 = s.lr_at(t + 1) - 2.0 * s.lr_at(t) + s.lr_at(t - 1);
            assert!(d2.abs() < 1e-15);
        }
    }

    #[test]
    fn default_warmup_ratio() {
        let s = Schedule::with_default_warmup(3e-4, 5_000_000).unwrap();
        assert_eq!(s.warmup_tokens, 6250);
        assert!(Schedule::new(1.0, 0, 10).is_err());
        assert!(Schedule::new(1.0, 10, 10).is_err());
    }
}
