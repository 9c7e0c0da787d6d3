//! Learning-rate schedules indexed by optimizer step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        lr: f64,
    },
    /// `lr0 / 2 * (1 + cos(pi * t / total_steps))`, zero after the end.
    Cosine {
        lr0: f64,
        total_steps: u64,
    },
    /// Linear ramp from `lr0 / warmup_steps` to `lr0` over the first
    /// `warmup_steps`, then a factor `gamma` at each milestone.
    WarmupStep {
        lr0: f64,
        warmup_steps: u64,
        milestones: Vec<u64>,
        gamma: f64,
    },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match self {
            Self::Constant { lr } if *lr < 0.0 || !lr.is_finite() => bad("learning rate must be >= 0"),
            Self::Cosine { lr0, .. } if *lr0 < 0.0 || !lr0.is_finite() => {
                bad("learning rate must be >= 0")
            }
            Self::WarmupStep {
                lr0,
                milestones,
                gamma,
                ..
            } => {
                if *lr0 < 0.0 || *gamma < 0.0 {
                    return bad("learning rate and gamma must be >= 0");
                }
                if milestones.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("milestones must be strictly increasing");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn initial(&self) -> f64 {
        self.at(0)
    }

    pub fn at(&self, t: u64) -> f64 {
        match self {
            Self::Constant { lr } => *lr,
            Self::Cosine { lr0, total_steps } => {
                if t >= *total_steps {
                    return 0.0;
                }
                let x = t as f64 / *total_steps as f64;
                lr0 / 2.0 * (1.0 + (std::f64::consts::PI * x).cos())
            }
            Self::WarmupStep {
                lr0,
                warmup_steps,
                milestones,
                gamma,
            } => {
                let base = if t < *warmup_steps {
                    lr0 * (t + 1) as f64 / *warmup_steps as f64
                } else {
                    *lr0
                };
                let drops = milestones.iter().filter(|&&m| t >= m).count();
                base * gamma.powi(drops as i32)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::Cosine {
            lr0: 0.1,
            total_steps: 1000,
        };
        assert_eq!(s.at(0), 0.1);
        assert!((s.at(500) - 0.05).abs() < 1e-15);
        assert_eq!(s.at(1000), 0.0);
        assert_eq!(s.at(5000), 0.0);
    }

    #[test]
    fn warmup_then_drops() {
        let s = LrSchedule::WarmupStep {
            lr0: 1.0,
            warmup_steps: 4,
            milestones: vec![10, 20],
            gamma: 0.1,
        };
        assert_eq!(s.at(0), 0.25);
        assert_eq!(s.at(3), 1.0);
        assert_eq!(s.at(9), 1.0);
        assert!((s.at(10) - 0.1).abs() < 1e-15);
        assert!((s.at(25) - 0.01).abs() < 1e-15);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(LrSchedule::Constant { lr: -1.0 }.validate().is_err());
        let s = LrSchedule::WarmupStep {
            lr0: 1.0,
            warmup_steps: 0,
            milestones: vec![5, 5],
            gamma: 0.1,
        };
        assert!(s.validate().is_err());
    }
}
