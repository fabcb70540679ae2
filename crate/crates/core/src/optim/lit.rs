use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_threshold() -> f64 {
    0.01
}
fn default_patience() -> u32 {
    1
}
fn default_interval() -> u64 {
    100
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LitConfig {
    /// Minimum relative improvement between consecutive interval losses.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Unfreeze on the `(patience + 1)`-th consecutive breach.
    #[serde(default = "default_patience")]
    pub patience: u32,
    /// Optimizer steps per averaging interval.
    #[serde(default = "default_interval")]
    pub interval_steps: u64,
}

impl Default for LitConfig {
    fn default() -> Self {
        LitConfig {
            threshold: default_threshold(),
            patience: default_patience(),
            interval_steps: default_interval(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LitEvent {
    None,
    Unfreeze,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LitState {
    pub config: LitConfig,
    pub breach_count: u32,
    pub prev_interval_loss: Option<f64>,
    pub unfrozen: bool,
}

impl LitState {
    pub fn new(config: LitConfig) -> Self {
        LitState {
            config,
            breach_count: 0,
            prev_interval_loss: None,
            unfrozen: false,
        }
    }

    /// Feed the mean training loss of one interval.
    pub fn observe(&mut self, interval_avg_loss: f64) -> Result<LitEvent> {
        if !(interval_avg_loss > 0.0 && interval_avg_loss.is_finite()) {
            return Err(Error::NonPositiveLoss(interval_avg_loss));
        }
        if self.unfrozen {
            return Ok(LitEvent::None);
        }
        let prev = self.prev_interval_loss.replace(interval_avg_loss);
        let Some(prev) = prev else {
            return Ok(LitEvent::None);
        };
        let ratio = (prev - interval_avg_loss) / prev;
        if ratio < self.config.threshold {
            self.breach_count += 1;
        } else {
            self.breach_count = 0;
        }
        if self.breach_count > self.config.patience {
            self.unfrozen = true;
            return Ok(LitEvent::Unfreeze);
        }
        Ok(LitEvent::None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(trace: &[f64]) -> Vec<LitEvent> {
        let mut s = LitState::new(LitConfig::default());
        trace.iter().map(|&l| s.observe(l).unwrap()).collect()
    }

    #[test]
    fn healthy_improvement_does_not_fire() {
        assert_eq!(run(&[4.0, 3.5]), vec![LitEvent::None; 2]);
    }

    #[test]
    fn two_consecutive_breaches_fire_on_fourth() {
        let ev = run(&[4.0, 3.5, 3.47, 3.45]);
        assert_eq!(ev, vec![LitEvent::None, LitEvent::None, LitEvent::None, LitEvent::Unfreeze]);
    }

    #[test]
    fn separated_breaches_do_not_fire() {
        assert!(run(&[4.0, 3.47, 3.5, 3.45]).iter().all(|&e| e == LitEvent::None));
    }

    #[test]
    fn one_shot() {
        let mut s = LitState::new(LitConfig::default());
        for l in [4.0, 3.5, 3.47, 3.45] {
            s.observe(l).unwrap();
        }
        let frozen = s.clone();
        for l in [3.45, 3.45, 1.0, 3.0] {
            assert_eq!(s.observe(l).unwrap(), LitEvent::None);
        }
        assert_eq!(s, frozen);
    }

    #[test]
    fn rejects_non_positive_loss() {
        let mut s = LitState::new(LitConfig::default());
        assert!(matches!(s.observe(0.0), Err(Error::NonPositiveLoss(_))));
        assert!(s.observe(f64::NAN).is_err());
    }
}
