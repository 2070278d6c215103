//! Adaptive-moment gradient descent.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mathx;
use crate::tensor::Tensor;

/// Adam with the standard defaults (lr 1e-3, betas 0.9/0.999, eps 1e-8).
///
/// Moment buffers are allocated lazily on the first step and keyed by
/// parameter position, so the caller must pass parameters in a stable
/// order across steps.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: u64,
    beta1_pow: f64,
    beta2_pow: f64,
    moments: Vec<(Tensor, Tensor)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            beta1_pow: 1.0,
            beta2_pow: 1.0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.steps
    }

    /// One update over a parameter list and matching gradient list.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "{} parameters vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::contract(format!(
                "optimizer state tracks {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(Error::shape(format!(
                    "gradient {i} shape {:?} vs parameter shape {:?}",
                    g.shape(),
                    params[i].shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::training(format!(
                    "non-finite gradient for parameter {i}"
                )));
            }
        }

        self.steps += 1;
        self.beta1_pow *= self.beta1;
        self.beta2_pow *= self.beta2;
        let bc1 = 1.0 - self.beta1_pow;
        let bc2 = 1.0 - self.beta2_pow;

        for ((param, grad), (m, v)) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            let md = m.data_mut();
            let vd = v.data_mut();
            let pd = param.data_mut();
            let gd = grad.data();
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * mhat / (mathx::sqrt(vhat) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut w = Tensor::vector(vec![1.0, -2.0, 3.0]);
        let g = Tensor::zeros(&[3]);
        let mut adam = Adam::new(1e-3);
        adam.step(&mut [&mut w], &[&g]).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn single_step_descends_on_square() {
        // f(w) = w^2 at w = 1: gradient 2, small lr moves toward zero.
        let mut w = Tensor::scalar(1.0);
        let g = Tensor::scalar(2.0);
        let mut adam = Adam::new(1e-2);
        adam.step(&mut [&mut w], &[&g]).unwrap();
        assert!(w.data()[0] < 1.0 && w.data()[0].abs() < 1.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // f(w) = sum((w - c)^2) reaches the minimum within 1e-3 in <= 500 steps.
        let target = [0.3, -1.2, 2.0];
        let mut w = Tensor::vector(vec![0.0; 3]);
        let mut adam = Adam::new(0.05);
        for _ in 0..500 {
            let g = Tensor::vector(
                w.data()
                    .iter()
                    .zip(&target)
                    .map(|(wi, ci)| 2.0 * (wi - ci))
                    .collect(),
            );
            adam.step(&mut [&mut w], &[&g]).unwrap();
        }
        for (wi, ci) in w.data().iter().zip(&target) {
            assert!((wi - ci).abs() < 1e-3, "w = {wi}, target {ci}");
        }
    }

    #[test]
    fn nan_gradient_is_a_training_error() {
        let mut w = Tensor::scalar(1.0);
        let g = Tensor::scalar(f64::NAN);
        let mut adam = Adam::new(1e-3);
        assert!(matches!(
            adam.step(&mut [&mut w], &[&g]),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn deterministic_given_state() {
        let run = || {
            let mut w = Tensor::vector(vec![1.0, 2.0]);
            let mut adam = Adam::new(1e-2);
            for k in 0..10 {
                let g = Tensor::vector(vec![0.5 + k as f64, -1.0]);
                adam.step(&mut [&mut w], &[&g]).unwrap();
            }
            w.data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
