//! AdamW: Adam moments with decoupled weight decay.

use super::{AutodiffError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state for a list of flat parameter buffers.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, sizes: &[usize]) -> Self {
        AdamW {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Rejects the whole step, leaving parameters and
    /// moments untouched, if any gradient is NaN or infinite.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(AutodiffError::StateMismatch(format!(
                "{} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(AutodiffError::StateMismatch(format!(
                    "slot {i}: param {} grad {} state {}",
                    p.len(),
                    g.len(),
                    self.m[i].len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(AutodiffError::NonFiniteGradient(i));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * p[j]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamWConfig {
        AdamWConfig {
            lr,
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut opt = AdamW::new(cfg(1e-3, 0.0), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        for _ in 0..5 {
            opt.step(&mut [&mut p[..]], &[&[0.0; 3][..]]).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step: mhat = g, vhat = g^2, so the update is
        // lr * g / (|g| + eps)
        let mut opt = AdamW::new(cfg(1e-3, 0.0), &[1]);
        let mut p = [0.0];
        opt.step(&mut [&mut p[..]], &[&[1.0][..]]).unwrap();
        let expected = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut opt = AdamW::new(cfg(1e-2, 0.1), &[2]);
        let mut p = [0.3, 0.3];
        for s in 0..50 {
            let g = (s as f64 * 0.37).sin();
            opt.step(&mut [&mut p[..]], &[&[g, g][..]]).unwrap();
        }
        assert_eq!(p[0], p[1]);
    }

    #[test]
    fn non_finite_gradient_rejected_without_side_effects() {
        let mut opt = AdamW::new(cfg(1e-3, 0.0), &[2]);
        let mut p = vec![1.0, 1.0];
        let err = opt.step(&mut [&mut p[..]], &[&[0.1, f64::NAN][..]]).unwrap_err();
        assert_eq!(err, AutodiffError::NonFiniteGradient(0));
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(opt.steps_taken(), 0);
    }
}
