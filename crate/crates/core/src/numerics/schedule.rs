use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{PamError, Result};

/// Learning-rate and temperature schedules over a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub temp_start: f64,
    pub temp_end: f64,
    pub total_epochs: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            lr_start: 5e-4,
            lr_end: 1e-5,
            temp_start: 0.15,
            temp_end: 0.05,
            total_epochs: 500,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(PamError::config("schedule.lr", "need lr_start >= lr_end > 0"));
        }
        if !(self.temp_end > 0.0 && self.temp_start >= self.temp_end) {
            return Err(PamError::config("schedule.temp", "need temp_start >= temp_end > 0"));
        }
        if self.total_epochs == 0 {
            return Err(PamError::config("schedule.total_epochs", "must be positive"));
        }
        Ok(())
    }

    fn progress(&self, epoch: usize) -> f64 {
        epoch.min(self.total_epochs) as f64 / self.total_epochs as f64
    }
}

/// `lr_end + ½(lr_start − lr_end)(1 + cos(π·e/E))`
pub fn cosine_lr(epoch: usize, schedule: &ScheduleConfig) -> f64 {
    let p = schedule.progress(epoch);
    schedule.lr_end + 0.5 * (schedule.lr_start - schedule.lr_end) * (1.0 + (PI * p).cos())
}

/// Linear interpolation from `temp_start` to `temp_end`.
pub fn anneal_temp(epoch: usize, schedule: &ScheduleConfig) -> f64 {
    let p = schedule.progress(epoch);
    schedule.temp_start + (schedule.temp_end - schedule.temp_start) * p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = ScheduleConfig::default();
        assert!((cosine_lr(0, &s) - 5e-4).abs() < 1e-18);
        assert!((cosine_lr(500, &s) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(250, &s) - 2.55e-4).abs() < 1e-15);
        assert!((anneal_temp(0, &s) - 0.15).abs() < 1e-15);
        assert!((anneal_temp(500, &s) - 0.05).abs() < 1e-15);
        assert!((anneal_temp(250, &s) - 0.10).abs() < 1e-15);
    }

    #[test]
    fn lr_is_monotone_non_increasing() {
        let s = ScheduleConfig::default();
        let lrs: Vec<f64> = (0..=500).map(|e| cosine_lr(e, &s)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn inverted_bounds_are_rejected() {
        let s = ScheduleConfig {
            lr_start: 1e-5,
            lr_end: 5e-4,
            ..ScheduleConfig::default()
        };
        assert!(s.validate().is_err());
        assert!(ScheduleConfig::default().validate().is_ok());
    }
}
