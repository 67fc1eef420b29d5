use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are stored in the parameter order
/// of [`crate::model::ModelParams::flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Returns the updated parameters.
    pub fn update(&mut self, params: &[&Tensor], grads: &[Tensor]) -> Vec<Tensor> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = i32::try_from(self.step).unwrap_or(i32::MAX);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut out = Vec::with_capacity(params.len());
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let mut next = (*p).clone();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in next.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
            out.push(next);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let p = Tensor::row(&[1.0, -2.0, 0.5]);
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        let next = adam.update(&[&p], &[Tensor::row(&[0.3, -4.0, 0.0])]);
        let d = next[0].data();
        assert!((d[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((d[1] - (-2.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(d[2], 0.5);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::row(&[3.0, -1.5]);
        let mut adam = Adam::new(
            AdamConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
            &[&p],
        );
        for _ in 0..2000 {
            let g = Tensor::row(&[2.0 * p.data()[0], 2.0 * p.data()[1]]);
            p = adam.update(&[&p], &[g]).remove(0);
        }
        assert!(p.data().iter().all(|x| x.abs() < 1e-2), "{:?}", p.data());
    }
}
