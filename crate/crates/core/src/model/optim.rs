use serde::{Deserialize, Serialize};

use super::graph::Mat;
use super::transformer::ModelParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// AdamW with decoupled weight decay on matrices (not on 1-row tensors).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ModelParams) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Mat::zeros(t.raw_dim()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Zeroes the moments and the bias-correction counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m
            .iter_mut()
            .chain(self.v.iter_mut())
            .for_each(|t| t.fill(0.0));
    }

    /// Applies one update. Returns the pre-clip gradient norm. A non-finite
    /// gradient leaves parameters and state untouched.
    pub fn update(&mut self, params: &mut ModelParams, grads: &[Mat], lr: f64) -> Result<f64> {
        if grads.len() != params.len() {
            return Err(Error::Numerical("gradient count mismatch".into()));
        }
        let sq: f64 = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Numerical("non-finite gradient".into()));
        }
        let c = self.config;
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let decay = if p.nrows() > 1 { c.weight_decay } else { 0.0 };
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g * scale;
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *p -= lr * (mh / (vh.sqrt() + c.eps) + decay * *p);
                });
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn params(x: Mat) -> ModelParams {
        ModelParams::new(vec!["w".into()], vec![x]).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g), ignoring eps.
        let mut p = params(array![[1.0], [0.0]]);
        let mut opt = AdamW::new(
            AdamWConfig {
                weight_decay: 0.0,
                clip_norm: 0.0,
                ..Default::default()
            },
            &p,
        );
        opt.update(&mut p, &[array![[0.5], [-2.0]]], 0.1).unwrap();
        let t = &p.tensors()[0];
        assert!((t[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((t[[1, 0]] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = params(array![[3.0, -2.0], [1.0, 4.0]]);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        for _ in 0..2000 {
            let g = p.tensors()[0].clone() * 2.0;
            opt.update(&mut p, &[g], 0.01).unwrap();
        }
        assert!(p.tensors()[0].iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = params(array![[1.0]]);
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let r = opt.update(&mut p, &[array![[f64::NAN]]], 0.1);
        assert!(matches!(r, Err(Error::Numerical(_))));
        assert_eq!(p, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn reset_clears_state() {
        let mut p = params(array![[1.0]]);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.update(&mut p, &[array![[1.0]]], 0.1).unwrap();
        opt.reset();
        assert_eq!(opt, AdamW::new(AdamWConfig::default(), &p));
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = params(array![[1.5, -0.25], [2.0, 3.0]]);
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..5 {
            opt.update(&mut p, &[Mat::zeros((2, 2))], 0.1).unwrap();
        }
        assert_eq!(p, before);
    }
}
