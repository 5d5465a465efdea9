//! SGD with classical momentum: v <- m*v + g; p <- p - lr*v.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub struct Sgd<T: Scalar> {
    lr: T,
    momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, param_count: usize) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::invalid("sgd: lr must be > 0"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("sgd: momentum must be in [0, 1)"));
        }
        Ok(Sgd {
            lr: T::from_f64(lr),
            momentum: T::from_f64(momentum),
            velocity: vec![Tensor::zeros(vec![0]); param_count],
        })
    }

    /// One update over aligned (param, grad) pairs. Velocity buffers are
    /// lazily shaped on first use.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() {
            return Err(Error::invalid(format!(
                "sgd: {} params, {} grads, {} velocity slots",
                params.len(),
                grads.len(),
                self.velocity.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "sgd: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            if v.shape() != p.shape() {
                *v = Tensor::zeros(p.shape().to_vec());
            }
            for ((pv, &gv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut())
            {
                *vv = self.momentum * *vv + gv;
                *pv = *pv - self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step_without_momentum() {
        // momentum 0, lr 0.1, p=1, g=2 -> p=0.8
        let mut p = Tensor::scalar(1.0f64);
        let g = Tensor::scalar(2.0f64);
        let mut opt = Sgd::new(0.1, 0.0, 1).unwrap();
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        // momentum 0.9, lr 1, g=1 twice from p0=0: p = -(1 + 1.9) = -2.9
        let mut p = Tensor::scalar(0.0f64);
        let mut opt = Sgd::new(1.0, 0.9, 1).unwrap();
        opt.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        opt.step(&mut [&mut p], &[Tensor::scalar(1.0)]).unwrap();
        assert!((p.item() + 2.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_param_unchanged() {
        let mut p = Tensor::scalar(5.0f64);
        let mut opt = Sgd::new(0.5, 0.9, 1).unwrap();
        opt.step(&mut [&mut p], &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.item(), 5.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::<f64>::zeros(vec![2]);
        let g = Tensor::<f64>::zeros(vec![3]);
        let mut opt = Sgd::new(0.1, 0.0, 1).unwrap();
        assert!(opt.step(&mut [&mut p], &[g]).is_err());
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(Sgd::<f64>::new(0.0, 0.0, 1).is_err());
        assert!(Sgd::<f64>::new(0.1, 1.0, 1).is_err());
        assert!(Sgd::<f64>::new(0.1, -0.1, 1).is_err());
    }
}
