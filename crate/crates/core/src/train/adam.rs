//! Bias-corrected Adam over the model's flat parameter list.

use crate::tensor::{Scalar, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Optimizer state: first/second moments per parameter plus the step count.
pub struct Adam<T> {
    pub learning_rate: T,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: T, shapes: &[Vec<usize>]) -> Self {
        Adam {
            learning_rate,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            t: 0,
        }
    }

    /// One update over aligned parameters and gradients. A `None` gradient
    /// means zero gradient: the parameter stays put while its moments decay.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<T>)], grads: &[Option<Tensor<T>>]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let b1 = T::of_f64(BETA1);
        let b2 = T::of_f64(BETA2);
        let eps = T::of_f64(EPSILON);
        let corr1 = T::one() - T::of_f64(BETA1.powi(self.t as i32));
        let corr2 = T::one() - T::of_f64(BETA2.powi(self.t as i32));
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.numel() {
                let gi = g.as_ref().map_or(T::zero(), |t| t.data()[i]);
                let mi = b1 * m.data()[i] + (T::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (T::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / corr1;
                let v_hat = vi / corr2;
                p.data_mut()[i] = p.data()[i] - self.learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
