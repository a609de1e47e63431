//! Adam with bias correction.

use crate::error::{KgeError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment accumulators for a list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>], config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            first: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            second: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    /// One update of every parameter with a gradient. `None` entries are
    /// treated as zero gradients: their moments still decay but, with zero
    /// accumulated moments, the parameter is left unchanged.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Vec<T>>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(KgeError::shape(
                "adam_step",
                &[params.len(), grads.len()],
                &[self.first.len()],
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.first[i].len() || g.as_ref().is_some_and(|g| g.len() != p.len()) {
                return Err(KgeError::shape("adam_step", p.shape(), &[self.first[i].len()]));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let b1 = T::from_f64_lossy(beta1);
        let b2 = T::from_f64_lossy(beta2);
        let step_size = T::from_f64_lossy(lr / bc1);
        let bc2_sqrt = T::from_f64_lossy(bc2.sqrt());
        let eps = T::from_f64_lossy(eps);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            match &grads[i] {
                Some(g) => {
                    for (((w, m), v), &g) in p.data_mut().iter_mut().zip(m).zip(v).zip(g) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        *w -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
                    }
                }
                None => {
                    for ((w, m), v) in p.data_mut().iter_mut().zip(m).zip(v) {
                        *m *= b1;
                        *v *= b2;
                        if *m != T::zero() {
                            *w -= step_size * *m / ((*v).sqrt() / bc2_sqrt + eps);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap()];
        let mut state = AdamState::new(&params, AdamConfig::default());
        let grads = vec![Some(vec![0.3, -7.0, 1e-3])];
        state.step(&mut params, &grads, 0.01).unwrap();
        let expect = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
        for (w, e) in params[0].data().iter().zip(expect) {
            assert!((w - e).abs() < 1e-6, "{w} vs {e}");
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![Tensor::new(vec![2], vec![1.0f64, -2.0]).unwrap()];
        let before = params.clone();
        let mut state = AdamState::new(&params, AdamConfig::default());
        state.step(&mut params, &[Some(vec![0.0, 0.0])], 0.1).unwrap();
        state.step(&mut params, &[None], 0.1).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut params = vec![Tensor::new(vec![1], vec![0.0f64]).unwrap()];
        let mut state = AdamState::new(&params, AdamConfig::default());
        for _ in 0..200 {
            let w = params[0].data()[0];
            state.step(&mut params, &[Some(vec![2.0 * (w - 3.0)])], 0.1).unwrap();
        }
        assert!((params[0].data()[0] - 3.0).abs() < 0.1, "{:?}", params[0].data());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap()];
        let mut state = AdamState::new(&params, AdamConfig::default());
        assert!(state.step(&mut params, &[Some(vec![1.0])], 0.1).is_err());
    }
}
