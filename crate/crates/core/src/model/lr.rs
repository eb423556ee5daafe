//! Linear warmup followed by cosine decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate curve: `initial_lr → peak_lr` linearly over `warmup_steps`,
/// then cosine from `peak_lr` to `floor_lr` over `decay_steps`, then flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrCurve {
    pub initial_lr: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
    pub floor_lr: f64,
}

impl LrCurve {
    /// Desk-scale defaults for a run of `total_steps`: warmup over the first
    /// 2/15 of the run (4K of 30K), decay over the rest.
    pub fn for_total(total_steps: u64) -> Self {
        let warmup_steps = (total_steps * 2 / 15).max(1);
        Self {
            initial_lr: 1e-7,
            peak_lr: 3e-4,
            warmup_steps,
            decay_steps: total_steps.saturating_sub(warmup_steps).max(1),
            floor_lr: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.initial_lr, self.peak_lr, self.floor_lr]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if !finite {
            return Err(Error::Config(
                "learning rates must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Learning rate at `step`.
pub fn lr_at(curve: &LrCurve, step: u64) -> f64 {
    if step < curve.warmup_steps {
        let frac = step as f64 / curve.warmup_steps as f64;
        return curve.initial_lr + (curve.peak_lr - curve.initial_lr) * frac;
    }
    let t = step - curve.warmup_steps;
    if t >= curve.decay_steps {
        return curve.floor_lr;
    }
    let progress = t as f64 / curve.decay_steps as f64;
    curve.floor_lr
        + (curve.peak_lr - curve.floor_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve() -> LrCurve {
        LrCurve {
            initial_lr: 1e-7,
            peak_lr: 5e-4,
            warmup_steps: 400,
            decay_steps: 2600,
            floor_lr: 1e-5,
        }
    }

    #[test]
    fn endpoints() {
        let c = curve();
        assert_eq!(lr_at(&c, 0), c.initial_lr);
        assert_eq!(lr_at(&c, c.warmup_steps), c.peak_lr);
        assert_eq!(lr_at(&c, c.warmup_steps + c.decay_steps), c.floor_lr);
        assert_eq!(lr_at(&c, 10 * c.decay_steps), c.floor_lr);
    }

    #[test]
    fn cosine_midpoint() {
        let c = curve();
        let mid = lr_at(&c, c.warmup_steps + c.decay_steps / 2);
        assert!((mid - (c.peak_lr + c.floor_lr) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn continuous_at_boundary() {
        let c = curve();
        let before = lr_at(&c, c.warmup_steps - 1);
        let after = lr_at(&c, c.warmup_steps + 1);
        let slope_up = (c.peak_lr - c.initial_lr) / c.warmup_steps as f64;
        assert!((c.peak_lr - before - slope_up).abs() < 1e-15);
        assert!(c.peak_lr - after < 1e-9);
    }

    #[test]
    fn monotone_pieces() {
        let c = curve();
        let w: Vec<f64> = (0..=c.warmup_steps).map(|s| lr_at(&c, s)).collect();
        assert!(w.windows(2).all(|p| p[0] <= p[1]));
        let d: Vec<f64> = (c.warmup_steps..=c.warmup_steps + c.decay_steps)
            .map(|s| lr_at(&c, s))
            .collect();
        assert!(d.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let c = LrCurve {
            warmup_steps: 0,
            ..curve()
        };
        assert_eq!(lr_at(&c, 0), c.peak_lr);
    }
}
