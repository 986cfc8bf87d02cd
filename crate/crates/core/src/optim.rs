//! Adam optimizer over a fixed list of parameter tensors.

use crate::error::{Error, Result};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::shape("adam step", p.shape(), g.shape()));
            }
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *w -= learning_rate * (*m / c1) / ((*v / c2).sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::from_vec(vec![1.0, -1.0, 0.5]);
        let g = Tensor::from_vec(vec![3.0, -0.2, 0.0]);
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        opt.step(vec![&mut p], &[g]).unwrap();
        // bias correction makes the first update lr·sign(g)
        assert!((p.data()[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p.data()[1] - (-1.0 + 1e-3)).abs() < 1e-7);
        assert_eq!(p.data()[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Tensor::from_vec(vec![3.0, -2.0]);
        let cfg = AdamConfig {
            learning_rate: 0.05,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &[&p]);
        for _ in 0..2000 {
            let g = p.map(|w| 2.0 * (w - 0.5));
            opt.step(vec![&mut p], &[g]).unwrap();
        }
        assert!(p.data().iter().all(|w| (w - 0.5).abs() < 1e-3));
    }

    #[test]
    fn mismatched_lists_are_rejected() {
        let mut p = Tensor::from_vec(vec![1.0]);
        let mut opt = Adam::new(AdamConfig::default(), &[&p]);
        assert!(opt.step(vec![&mut p], &[]).is_err());
    }
}
