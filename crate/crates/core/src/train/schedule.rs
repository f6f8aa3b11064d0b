use alloc::format;
use core::f64::consts::PI;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::{DexError, Precision, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TrainConfig {
    /// Optimizer steps `T`.
    pub steps: usize,
    /// Fraction of `T` spent in linear learning-rate warmup.
    pub warmup_fraction: f64,
    pub base_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lambda_co: f64,
    /// Start of the cosine-decayed balance weight.
    pub lambda_bal_init: f64,
    /// Constant balance weight overriding the schedule.
    pub lambda_bal_fixed: Option<f64>,
    pub sigma_init: f64,
    pub m_init: f64,
    pub m_final: f64,
    /// Momentum of the activation-frequency EMA.
    pub mu: f64,
    pub seed: u64,
    pub precision: Precision,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            warmup_fraction: 0.1,
            base_lr: 1e-3,
            batch_size: 64,
            weight_decay: 0.05,
            lambda_co: 0.1,
            lambda_bal_init: 0.01,
            lambda_bal_fixed: None,
            sigma_init: 1.0,
            m_init: 0.99,
            m_final: 1.0,
            mu: 0.99,
            seed: 0,
            precision: Precision::F64,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m| Err(DexError::Config(m));
        if self.steps == 0 {
            return err("steps must be at least 1".into());
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return err(format!("warmup_fraction {} outside (0, 1)", self.warmup_fraction));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 {
            return err("base_lr must be > 0 and weight_decay >= 0".into());
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.m_init) || !unit(self.m_final) || self.m_final < self.m_init {
            return err(format!(
                "GEMA momentum must rise within [0, 1]: {} -> {}",
                self.m_init, self.m_final
            ));
        }
        if !unit(self.mu) {
            return err(format!("mu {} outside [0, 1]", self.mu));
        }
        if self.sigma_init < 0.0 || self.lambda_co < 0.0 || self.lambda_bal_init < 0.0 {
            return err("sigma_init, lambda_co and lambda_bal_init must be >= 0".into());
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return err("grad_clip must be > 0 when set".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.steps as f64).round() as usize).max(1)
    }
}

/// Scheduled values at one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub momentum: f64,
    pub sigma: f64,
    pub lambda_bal: f64,
}

/// Learning rate warms up linearly and then follows a cosine to zero; GEMA
/// momentum rises, and noise and balance weight fall, along a cosine over
/// the whole run.
pub fn schedules(step: usize, config: &TrainConfig) -> Schedule {
    let total = config.steps.max(1);
    let t = step.min(total) as f64;
    let warm = config.warmup_steps().min(total);
    let lr = if step < warm {
        config.base_lr * (t + 1.0) / warm as f64
    } else if total == warm {
        0.0
    } else {
        let p = (t - warm as f64) / (total - warm) as f64;
        config.base_lr * 0.5 * (1.0 + (PI * p).cos())
    };
    // 1 at t = 0, 0 at t = T
    let fall = 0.5 * (1.0 + (PI * t / total as f64).cos());
    Schedule {
        lr,
        momentum: config.m_final - (config.m_final - config.m_init) * fall,
        sigma: config.sigma_init * fall,
        lambda_bal: config.lambda_bal_fixed.unwrap_or(config.lambda_bal_init * fall),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig {
            steps: 1000,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn endpoints() {
        let c = cfg();
        let s0 = schedules(0, &c);
        assert_eq!(s0.momentum, 0.99);
        assert_eq!(s0.sigma, 1.0);
        assert_eq!(s0.lambda_bal, 0.01);
        let st = schedules(c.steps, &c);
        assert_eq!(st.momentum, 1.0);
        assert_eq!(st.sigma, 0.0);
        assert_eq!(st.lambda_bal, 0.0);
        assert!(st.lr.abs() < 1e-20);
    }

    #[test]
    fn midpoint() {
        let c = cfg();
        let s = schedules(c.steps / 2, &c);
        assert!((s.momentum - 0.995).abs() < 1e-12);
        assert!((s.sigma - 0.5).abs() < 1e-12);
        assert!((s.lambda_bal - 0.005).abs() < 1e-12);
    }

    #[test]
    fn warmup_then_decay() {
        let c = cfg();
        let w = c.warmup_steps();
        assert_eq!(w, 100);
        assert!((schedules(w - 1, &c).lr - c.base_lr).abs() < 1e-18);
        assert!(schedules(0, &c).lr < schedules(50, &c).lr);
        let mut prev = f64::INFINITY;
        for t in w..=c.steps {
            let lr = schedules(t, &c).lr;
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn momentum_monotone() {
        let c = cfg();
        let mut prev = 0.0;
        for t in 0..=c.steps {
            let m = schedules(t, &c).momentum;
            assert!(m >= prev && m <= 1.0);
            prev = m;
        }
    }

    #[test]
    fn fixed_balance_override() {
        let c = TrainConfig {
            lambda_bal_fixed: Some(0.001),
            ..cfg()
        };
        assert_eq!(schedules(0, &c).lambda_bal, 0.001);
        assert_eq!(schedules(700, &c).lambda_bal, 0.001);
    }
}
