//! Step-dependent scalars driving the exploration→exploitation transition:
//! gating noise scale, softmax temperature and entropy coefficient.
//!
//! `t` is the global optimizer step and `total_steps` the horizon `T`.
//! Steps past the horizon are clamped to `T`.

use std::sync::Once;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub sigma_max: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub gamma: f64,
    pub beta_max: f64,
    pub total_steps: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            sigma_max: 0.5,
            tau_min: 0.1,
            tau_max: 2.0,
            gamma: 5.0,
            beta_max: 0.05,
            total_steps: 1,
        }
    }
}

impl ScheduleConfig {
    pub fn with_total_steps(mut self, total_steps: u64) -> Self {
        self.total_steps = total_steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("sigma_max", self.sigma_max),
            ("gamma", self.gamma),
            ("beta_max", self.beta_max),
        ];
        for (field, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(self.tau_min > 0.0 && self.tau_max > self.tau_min && self.tau_max.is_finite()) {
            return Err(Error::config(
                "tau_min",
                format!(
                    "need tau_max > tau_min > 0, got tau_min={} tau_max={}",
                    self.tau_min, self.tau_max
                ),
            ));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be >= 1"));
        }
        Ok(())
    }

    /// Training progress `t / T`, clamped to 1.
    fn progress(&self, t: u64) -> f64 {
        if t > self.total_steps {
            static PAST_HORIZON: Once = Once::new();
            PAST_HORIZON.call_once(|| {
                log::warn!(
                    "step {t} is past the schedule horizon T={}; schedules clamped to t=T",
                    self.total_steps
                )
            });
            return 1.0;
        }
        t as f64 / self.total_steps as f64
    }

    /// σ_max·(1 − t/T)
    pub fn noise_scale(&self, t: u64) -> f64 {
        self.sigma_max * (1.0 - self.progress(t))
    }

    /// τ_min + (τ_max − τ_min)·exp(−γ·t/T)
    pub fn temperature(&self, t: u64) -> f64 {
        self.tau_min + (self.tau_max - self.tau_min) * (-self.gamma * self.progress(t)).exp()
    }

    /// β_max·(2t/T − 1)
    pub fn entropy_coefficient(&self, t: u64) -> f64 {
        self.beta_max * (2.0 * self.progress(t) - 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(total: u64) -> ScheduleConfig {
        ScheduleConfig::default().with_total_steps(total)
    }

    #[test]
    fn noise_scale_examples() {
        let c = cfg(100);
        assert_eq!(c.noise_scale(0), 0.5);
        assert_eq!(c.noise_scale(100), 0.0);
        assert_eq!(c.noise_scale(50), 0.25);
        assert_eq!(c.noise_scale(250), 0.0);
    }

    #[test]
    fn temperature_examples() {
        let c = cfg(100);
        assert_eq!(c.temperature(0), 2.0);
        assert!((c.temperature(100) - 0.11280).abs() < 1e-5);
        let flat = ScheduleConfig {
            gamma: 0.0,
            ..c.clone()
        };
        assert!((0..=100).all(|t| flat.temperature(t) == 2.0));
        assert_eq!(c.temperature(1000), c.temperature(100));
    }

    #[test]
    fn entropy_coefficient_examples() {
        let c = cfg(100);
        assert_eq!(c.entropy_coefficient(0), -0.05);
        assert_eq!(c.entropy_coefficient(50), 0.0);
        assert_eq!(c.entropy_coefficient(100), 0.05);
    }

    #[test]
    fn validation() {
        assert!(cfg(10).validate().is_ok());
        assert!(cfg(0).validate().is_err());
        let bad = ScheduleConfig {
            tau_min: 2.0,
            ..cfg(10)
        };
        assert!(bad.validate().is_err());
        let bad = ScheduleConfig {
            tau_min: 0.0,
            ..cfg(10)
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn schedules_monotone(total in 1u64..5000, a in 0u64..5000, b in 0u64..5000) {
            let c = cfg(total);
            let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
            prop_assert!(c.noise_scale(lo) >= c.noise_scale(hi));
            prop_assert!(c.temperature(hi) >= c.tau_min);
            if lo < hi {
                prop_assert!(c.temperature(lo) > c.temperature(hi));
            }
            // antisymmetric about T/2: β(t) = −β(T − t)
            let mirrored = c.entropy_coefficient(total - lo);
            prop_assert!((c.entropy_coefficient(lo) + mirrored).abs() < 1e-15);
        }
    }
}
