//! Learning-rate schedule: linear warm-up to the target rate, then
//! polynomial decay to zero.

use crate::error::{BcafError, Result};

/// Multiplier in [0, 1] for the configured target learning rate.
///
/// Linear 0 -> 1 over `warmup_steps`, then ((1 - t)^power) where t is the
/// post-warmup progress.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, power: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(BcafError::Config("schedule needs total_steps > 0".into()));
    }
    if warmup_steps >= total_steps {
        return Err(BcafError::Config(format!(
            "warmup {warmup_steps} must be shorter than training {total_steps}"
        )));
    }
    let step = step.min(total_steps);
    if step < warmup_steps {
        return Ok(step as f64 / warmup_steps as f64);
    }
    let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok((1.0 - t).max(0.0).powf(power))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_values() {
        // Start of warmup.
        assert_eq!(lr_schedule(0, 100, 10, 0.9).unwrap(), 0.0);
        // End of warmup hits 1.0 exactly.
        assert_eq!(lr_schedule(10, 100, 10, 0.9).unwrap(), 1.0);
        // Midpoint of decay: 0.5^0.9.
        let mid = lr_schedule(55, 100, 10, 0.9).unwrap();
        assert!((mid - 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((mid - 0.5359).abs() < 1e-3);
        // End of training decays to zero.
        assert_eq!(lr_schedule(100, 100, 10, 0.9).unwrap(), 0.0);
        // Degenerate schedules are rejected.
        assert!(lr_schedule(0, 0, 0, 0.9).is_err());
        assert!(lr_schedule(0, 10, 10, 0.9).is_err());
    }

    #[test]
    fn continuous_and_non_increasing_after_warmup() {
        let total = 200u64;
        let warmup = 20u64;
        let mut prev = lr_schedule(warmup, total, warmup, 0.9).unwrap();
        // Continuity at the boundary: the warmup side approaches 1 from below.
        let before = lr_schedule(warmup - 1, total, warmup, 0.9).unwrap();
        assert!((prev - before) < 0.06);
        for step in warmup + 1..=total {
            let cur = lr_schedule(step, total, warmup, 0.9).unwrap();
            assert!(cur <= prev + 1e-15, "schedule must not increase after warmup");
            prev = cur;
        }
    }
}
