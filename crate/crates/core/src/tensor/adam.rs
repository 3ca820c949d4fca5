use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily on the
/// first step and must keep matching the parameter shapes afterwards.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::shape("adam_step", &[self.first.len()], &[params.len()]));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::shape("adam_step", p.shape(), &[g.len()]));
            }
        }
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps as i32);
        let c2 = 1.0 - beta2.powi(self.steps as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        opt.step(&mut p, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        let mut p = vec![Tensor::vector(vec![0.0])];
        opt.step(&mut p, &[vec![1.0]]).unwrap();
        // lr * 1 / (1 + eps)
        assert!((p[0].data()[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn quadratic_converges_like_reference() {
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        let mut p = vec![Tensor::vector(vec![0.0])];
        for _ in 0..100 {
            let g = 2.0 * (p[0].data()[0] - 3.0);
            opt.step(&mut p, &[vec![g]]).unwrap();
        }
        let w = p[0].data()[0];
        // torch.optim.Adam(lr=0.1), float64, same 100 steps
        assert!((w - 2.9806554375278123).abs() < 1e-12, "{w}");
        assert!((w - 3.0).abs() < 0.05);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut opt = Adam::new(AdamConfig::default());
        let mut p = vec![Tensor::vector(vec![0.0, 1.0])];
        assert!(opt.step(&mut p, &[vec![1.0]]).is_err());
    }
}
