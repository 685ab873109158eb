use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Warmup schedule settings. `printed_form` selects the
/// `s · w^-0.5` warmup branch instead of the usual `s · w^-1.5`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup: u64,
    /// Constant factor applied on top of the schedule.
    pub scale: f64,
    pub printed_form: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            warmup: 400,
            scale: 1.0,
            printed_form: false,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 {
            return Err(Error::config("schedule.warmup", "must be at least 1"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config("schedule.scale", "must be positive"));
        }
        Ok(())
    }

    /// Learning rate for 1-based optimizer step `s`.
    pub fn lr(&self, s: u64, d: usize) -> Result<f64> {
        let base = if self.printed_form {
            noam_lr_printed(s, d, self.warmup)?
        } else {
            noam_lr(s, d, self.warmup)?
        };
        Ok(self.scale * base)
    }
}

fn check(s: u64, w: u64) -> Result<()> {
    if s == 0 {
        return Err(Error::Usage("learning-rate steps count from 1".into()));
    }
    if w == 0 {
        return Err(Error::config("schedule.warmup", "must be at least 1"));
    }
    Ok(())
}

/// `d^-0.5 · min(s^-0.5, s · w^-1.5)`: linear warmup to a peak at `s = w`,
/// then inverse square-root decay.
pub fn noam_lr(s: u64, d: usize, w: u64) -> Result<f64> {
    check(s, w)?;
    let (s, w) = (s as f64, w as f64);
    Ok((d as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// `d^-0.5 · min(s^-0.5, s · w^-0.5)`. Agrees with [`noam_lr`] at `s = w`
/// but its warmup branch is `w` times larger.
pub fn noam_lr_printed(s: u64, d: usize, w: u64) -> Result<f64> {
    check(s, w)?;
    let (s, w) = (s as f64, w as f64);
    Ok((d as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-0.5)))
}
