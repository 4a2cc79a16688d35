use serde::{Deserialize, Serialize};

use super::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coefficient of the `l2·θ` term added to every gradient.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2: 0.0,
        }
    }
}

/// Adam with bias correction and optional L2 regularization.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Allocates moment buffers for parameters of the given lengths.
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::Dimension {
                op: "adam_step",
                lhs: vec![self.m.len()],
                rhs: vec![params.len(), grads.len()],
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(TensorError::Dimension {
                    op: "adam_step",
                    lhs: vec![self.m[i].len()],
                    rhs: vec![p.len(), g.len()],
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            l2,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for j in 0..p.len() {
                let grad = g[j] + l2 * p[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * grad;
                v[j] = beta2 * v[j] + (1.0 - beta2) * grad * grad;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_descends_on_square() {
        let mut theta = [1.0];
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &[1]);
        let grad = [2.0 * theta[0]];
        opt.step(&mut [&mut theta], &[&grad]).unwrap();
        assert!(theta[0] < 1.0);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut theta = [0.7, -3.0];
        let mut opt = Adam::new(AdamConfig::default(), &[2]);
        for _ in 0..5 {
            opt.step(&mut [&mut theta], &[&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(theta, [0.7, -3.0]);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(x, y) = (x - 1)^2 + 3 (y + 2)^2, optimum (1, -2).
        let grad = |p: &[f64]| [2.0 * (p[0] - 1.0), 6.0 * (p[1] + 2.0)];
        let mut p = [4.0, 3.0];
        let mut opt = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &[2]);
        for _ in 0..200 {
            let g = grad(&p);
            opt.step(&mut [&mut p], &[&g]).unwrap();
        }
        let g = grad(&p);
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!(norm < 1e-3, "gradient norm {norm} at {p:?}");
    }

    #[test]
    fn l2_shrinks_without_loss_gradient() {
        let mut theta = [2.0];
        let mut opt = Adam::new(AdamConfig { l2: 0.001, ..Default::default() }, &[1]);
        opt.step(&mut [&mut theta], &[&[0.0]]).unwrap();
        assert!(theta[0] < 2.0);
    }

    #[test]
    fn mismatched_buffers_are_rejected() {
        let mut theta = [0.0; 3];
        let mut opt = Adam::new(AdamConfig::default(), &[2]);
        assert!(opt.step(&mut [&mut theta], &[&[0.0; 3]]).is_err());
    }
}
