//! Adam optimizer state for a flat list of parameter tensors.

use super::tensor::{Real, Tensor};
use super::AutodiffError;

/// First/second moment accumulators for one group of parameters, updated in
/// lockstep with bias correction.
pub struct AdamState<T: Real> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(shapes: &[&[usize]], lr: T) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            step: 0,
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
        }
    }

    pub fn set_lr(&mut self, lr: T) {
        self.lr = lr;
    }

    pub fn lr(&self) -> T {
        self.lr
    }

    /// Applies one update. `params[i]` is adjusted in place using `grads[i]`;
    /// a `None` gradient leaves that parameter (and its moments) untouched.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Option<&Tensor<T>>],
    ) -> Result<(), AutodiffError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(AutodiffError::ShapeMismatch {
                expected: vec![self.m.len()],
                got: vec![params.len(), grads.len()],
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = T::ONE / T::from_f64(1.0 - self.beta1.to_f64().powi(t));
        let bc2 = T::ONE / T::from_f64(1.0 - self.beta2.to_f64().powi(t));
        for i in 0..params.len() {
            let Some(g) = grads[i] else { continue };
            if g.shape() != params[i].shape() {
                return Err(AutodiffError::ShapeMismatch {
                    expected: params[i].shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            let (b1, b2) = (self.beta1, self.beta2);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..g.len() {
                let gj = g.data()[j];
                let mj = b1 * m.data()[j] + (T::ONE - b1) * gj;
                let vj = b2 * v.data()[j] + (T::ONE - b2) * gj * gj;
                m.data_mut()[j] = mj;
                v.data_mut()[j] = vj;
                let mhat = mj * bc1;
                let vhat = vj * bc2;
                params[i].data_mut()[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // With m_hat = g and v_hat = g^2 on step one, the update is
        // lr * g / (|g| + eps), i.e. almost exactly lr.
        let mut p = Tensor::<f64>::from_vec(&[1], vec![1.0]);
        let g = Tensor::from_vec(&[1], vec![1.0]);
        let mut adam = AdamState::new(&[&[1]], 0.1);
        adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-8, "got {}", p.data()[0]);
    }

    #[test]
    fn converges_on_quadratic() {
        // Minimize (x - 3)^2 from x = 0.
        let mut p = Tensor::<f64>::from_vec(&[1], vec![0.0]);
        let mut adam = AdamState::new(&[&[1]], 0.05);
        for _ in 0..2000 {
            let g = Tensor::from_vec(&[1], vec![2.0 * (p.data()[0] - 3.0)]);
            adam.step(&mut [&mut p], &[Some(&g)]).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 1e-3, "got {}", p.data()[0]);
    }

    #[test]
    fn rejects_mismatched_gradient_shape() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut adam = AdamState::new(&[&[2]], 0.1);
        assert!(adam.step(&mut [&mut p], &[Some(&g)]).is_err());
    }

    #[test]
    fn none_gradient_skips_parameter() {
        let mut p = Tensor::<f64>::from_vec(&[2], vec![1.0, 2.0]);
        let mut adam = AdamState::new(&[&[2]], 0.1);
        adam.step(&mut [&mut p], &[None]).unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
    }
}
