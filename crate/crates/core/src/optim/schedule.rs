use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < lr_min <= lr_max, got lr_min={} lr_max={}",
                self.lr_min, self.lr_max
            )));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_max`, then cosine decay to `lr_min` at
/// `total_steps`.
pub fn lr_at(step: u64, s: &ScheduleConfig) -> Result<f64> {
    s.validate()?;
    if step > s.total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: s.total_steps,
        });
    }
    if step < s.warmup_steps {
        return Ok(s.lr_max * step as f64 / s.warmup_steps as f64);
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    Ok(s.lr_min + 0.5 * (s.lr_max - s.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn sched() -> ScheduleConfig {
        ScheduleConfig {
            lr_max: 3e-4,
            lr_min: 3e-5,
            warmup_steps: 2000,
            total_steps: 10000,
        }
    }

    #[test]
    fn anchor_points() {
        let s = sched();
        assert_eq!(lr_at(0, &s).unwrap(), 0.0);
        assert!((lr_at(2000, &s).unwrap() - 3e-4).abs() < 1e-18);
        assert!((lr_at(10000, &s).unwrap() - 3e-5).abs() < 1e-18);
        assert!((lr_at(6000, &s).unwrap() - 1.65e-4).abs() < 1e-15);
        assert!((lr_at(1000, &s).unwrap() - 1.5e-4).abs() < 1e-18);
    }

    #[test]
    fn errors() {
        let s = sched();
        assert!(matches!(lr_at(10001, &s), Err(Error::StepOutOfRange { step: 10001, total: 10000 })));
        let mut bad = s;
        bad.lr_min = 1e-3;
        assert!(lr_at(0, &bad).is_err());
        bad = s;
        bad.warmup_steps = 10000;
        assert!(lr_at(0, &bad).is_err());
    }

    #[test]
    fn continuous_at_warmup() {
        let s = sched();
        let before = lr_at(1999, &s).unwrap();
        let at = lr_at(2000, &s).unwrap();
        let after = lr_at(2001, &s).unwrap();
        assert!((at - before) <= 3e-4 / 2000.0 + 1e-15);
        assert!(at - after < 1e-9);
    }

    proptest! {
        #[test]
        fn non_increasing_after_warmup(w in 0u64..500, extra in 1u64..2000, a in 0u64..2500, b in 0u64..2500) {
            let s = ScheduleConfig { lr_max: 1e-3, lr_min: 1e-5, warmup_steps: w, total_steps: w + extra };
            let (lo, hi) = (a.min(b).clamp(w, w + extra), a.max(b).clamp(w, w + extra));
            prop_assert!(lr_at(lo, &s).unwrap() >= lr_at(hi, &s).unwrap());
            let mid = lr_at(lo, &s).unwrap();
            prop_assert!((s.lr_min..=s.lr_max).contains(&mid));
        }
    }
}
