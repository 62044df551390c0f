use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Heavy-ball SGD: `v <- mu v + g`, `theta <- theta - lr v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum<T: Scalar = f32> {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        SgdMomentum {
            lr,
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape {
                op: "sgd_momentum_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(Error::Shape {
                    op: "sgd_momentum_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        let (lr, mu) = (T::of(self.lr), T::of(self.momentum));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = mu * *vi + gi;
                *pi = *pi - lr * *vi;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`SgdMomentum::step`].
pub fn sgd_momentum_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut SgdMomentum<T>,
) -> Result<()> {
    state.step(params, grads)
}
