//! SGD with momentum and weight decay, and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    /// Encoder defaults: lr 0.03, momentum 0.9, weight decay 1e-4.
    pub fn network() -> Self {
        Self {
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }

    /// Adversary defaults: lr 3.0, no momentum, no weight decay.
    pub fn adversary() -> Self {
        Self {
            lr: 3.0,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(format!("{section}.lr"), "must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("{section}.momentum"), "must lie in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(format!("{section}.weight_decay"), "must be >= 0"));
        }
        Ok(())
    }
}

/// Velocity buffers for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(config: SgdConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            velocity: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// `g' = g + wd·θ;  v ← μ·v + g';  θ ← θ − lr·v`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr_now: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::Shape(format!(
                "{} parameter tensors, {} gradients, {} velocity buffers",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.velocity[i].len() {
                return Err(Error::Shape(format!(
                    "tensor {i}: {} params, {} grads, {} velocity",
                    p.len(),
                    g.len(),
                    self.velocity[i].len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("gradient tensor {i}")));
            }
        }
        if !(lr_now.is_finite() && lr_now >= 0.0) {
            return Err(Error::Numeric(format!("learning rate {lr_now}")));
        }
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, &gv), vv) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                let g_eff = gv + weight_decay * *pv;
                *vv = momentum * *vv + g_eff;
                if lr_now != 0.0 {
                    *pv -= lr_now * *vv;
                }
            }
        }
        Ok(())
    }
}

/// `lr_base · ½(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_base: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Schedule { step, total: total_steps });
    }
    if step > total_steps {
        return Err(Error::Schedule { step, total: total_steps });
    }
    if step == total_steps {
        return Ok(0.0);
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, momentum: f64, wd: f64) -> SgdConfig {
        SgdConfig {
            lr,
            momentum,
            weight_decay: wd,
        }
    }

    #[test]
    fn vanilla_sgd() {
        let mut state = SgdState::new(cfg(0.1, 0.0, 0.0), &[3]);
        let mut p = vec![1.0, 2.0, 3.0];
        state.step(&mut [&mut p], &[&[0.5, -1.0, 0.0]], 0.1).unwrap();
        assert_eq!(p, vec![1.0 - 0.1 * 0.5, 2.0 + 0.1, 3.0]);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut state = SgdState::new(cfg(0.1, 0.9, 1e-4), &[2]);
        let mut p = vec![0.3, -0.7];
        let before = p.clone();
        state.step(&mut [&mut p], &[&[4.0, 5.0]], 0.0).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn zero_grads_identity() {
        let mut state = SgdState::new(cfg(0.1, 0.0, 0.0), &[2]);
        let mut p = vec![0.3, -0.7];
        state.step(&mut [&mut p], &[&[0.0, 0.0]], 0.5).unwrap();
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn momentum_unrolls() {
        // v1 = g, v2 = 1.9 g  ⇒  displacement lr·g·2.9
        let (lr, g) = (0.05, 0.8);
        let mut state = SgdState::new(cfg(lr, 0.9, 0.0), &[1]);
        let mut p = vec![0.0];
        state.step(&mut [&mut p], &[&[g]], lr).unwrap();
        state.step(&mut [&mut p], &[&[g]], lr).unwrap();
        assert!((p[0] + lr * g * 2.9).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_enters_gradient() {
        let mut state = SgdState::new(cfg(0.1, 0.0, 0.5), &[1]);
        let mut p = vec![2.0];
        state.step(&mut [&mut p], &[&[0.0]], 0.1).unwrap();
        assert!((p[0] - (2.0 - 0.1 * 1.0)).abs() < 1e-15);
    }

    #[test]
    fn step_errors() {
        let mut state = SgdState::new(cfg(0.1, 0.0, 0.0), &[2]);
        let mut p = vec![0.0, 0.0];
        assert!(matches!(state.step(&mut [&mut p], &[&[1.0]], 0.1), Err(Error::Shape(_))));
        assert!(matches!(
            state.step(&mut [&mut p], &[&[f64::INFINITY, 0.0]], 0.1),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 0.03).unwrap(), 0.03);
        assert_eq!(cosine_lr(100, 100, 0.03).unwrap(), 0.0);
        assert!((cosine_lr(50, 100, 0.03).unwrap() - 0.015).abs() < 1e-17);
        assert!(matches!(cosine_lr(101, 100, 1.0), Err(Error::Schedule { .. })));
        assert!(cosine_lr(0, 0, 1.0).is_err());
    }

    #[test]
    fn cosine_schedule_is_non_increasing() {
        for total in [1usize, 7, 100, 3101] {
            let mut prev = f64::INFINITY;
            for s in 0..=total {
                let lr = cosine_lr(s, total, 3.0).unwrap();
                assert!(lr <= prev);
                assert!(lr >= 0.0);
                prev = lr;
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig::network().validate("optim.net").is_ok());
        assert!(cfg(0.1, 1.0, 0.0).validate("x").is_err());
        assert!(cfg(-0.1, 0.0, 0.0).validate("x").is_err());
        let err = cfg(0.1, 0.0, -1.0).validate("optim.adv").unwrap_err();
        assert!(err.to_string().contains("optim.adv.weight_decay"));
    }
}
