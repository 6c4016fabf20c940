//! Heavy-ball SGD: `v ← βv + g`, `p ← p − lr·v`.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SgdMomentum {
    lr: f32,
    momentum: f32,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    /// Optimizer with zero velocity for parameters of the given shapes.
    pub fn new(lr: f32, momentum: f32, shapes: &[&[usize]]) -> Result<Self> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        let velocity = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        Ok(SgdMomentum { lr, momentum, velocity })
    }

    pub fn for_params(lr: f32, momentum: f32, params: &[Tensor]) -> Result<Self> {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        Self::new(lr, momentum, &shapes)
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// One update of every parameter in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(shape_err(
                "sgd_momentum_step",
                format!("{} params, {} grads, {} velocity slots", params.len(), grads.len(), self.velocity.len()),
            ));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() || p.shape() != v.shape() {
                return Err(shape_err(
                    "sgd_momentum_step",
                    format!("param {:?}, grad {:?}, velocity {:?}", p.shape(), g.shape(), v.shape()),
                ));
            }
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn plain_sgd() {
        let mut opt = SgdMomentum::new(0.1, 0.0, &[&[1]]).unwrap();
        let mut p = vec![one(1.0)];
        opt.step(&mut p, &[&one(2.0)]).unwrap();
        assert!((p[0].item() - 0.8).abs() < 1e-7);
    }

    #[test]
    fn momentum_recurrence_unrolled() {
        let mut opt = SgdMomentum::new(1.0, 0.9, &[&[1]]).unwrap();
        let mut p = vec![one(0.0)];
        opt.step(&mut p, &[&one(1.0)]).unwrap();
        opt.step(&mut p, &[&one(1.0)]).unwrap();
        assert!((p[0].item() + 2.9).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_with_zero_velocity_is_a_no_op() {
        let mut opt = SgdMomentum::new(0.5, 0.9, &[&[3]]).unwrap();
        let before = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let mut p = vec![before.clone()];
        opt.step(&mut p, &[&Tensor::zeros(&[3])]).unwrap();
        assert_eq!(p[0], before);
    }

    #[test]
    fn rejects_bad_hyperparameters_and_shapes() {
        assert!(SgdMomentum::new(0.0, 0.5, &[]).is_err());
        assert!(SgdMomentum::new(0.1, 1.0, &[]).is_err());
        let mut opt = SgdMomentum::new(0.1, 0.0, &[&[2]]).unwrap();
        let mut p = vec![Tensor::zeros(&[2])];
        assert!(matches!(opt.step(&mut p, &[&Tensor::zeros(&[3])]), Err(Error::Shape { .. })));
    }
}
