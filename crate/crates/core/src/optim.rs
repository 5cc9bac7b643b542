//! SGD with momentum and coupled weight decay, plus the step learning-rate
//! schedule.

use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

/// One update: `v ← m·v + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &Tensor,
    velocity: &mut Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != velocity.shape() {
        return Err(Error::shape("sgd_step", param.shape(), grad.shape()));
    }
    if !(lr > 0.0) {
        return Err(Error::param("lr", "learning rate must be positive"));
    }
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        *v = momentum * *v + (g + weight_decay * *p);
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum buffers for a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.into_iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::Contract("optimizer parameter list changed".into()));
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            sgd_step(p, g, v, lr, self.momentum, self.weight_decay)?;
        }
        Ok(())
    }
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`; returns
/// the norm before clipping. `max_norm = 0` disables clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>());
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
    }
    norm
}

/// `initial · factor^(number of decay epochs ≤ epoch)`.
pub fn lr_schedule(epoch: usize, initial_lr: f64, decay_epochs: &[usize], factor: f64) -> f64 {
    let n = decay_epochs.iter().filter(|&&d| d <= epoch).count();
    let mut lr = initial_lr;
    for _ in 0..n {
        lr *= factor;
    }
    lr
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping_rescales_jointly() {
        let mut g = vec![s(3.0), s(4.0)];
        assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
        assert_eq!((g[0].data()[0], g[1].data()[0]), (3.0, 4.0));
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15 && (g[1].data()[0] - 0.8).abs() < 1e-15);
        let mut h = vec![s(30.0)];
        clip_grad_norm(&mut h, 0.0);
        assert_eq!(h[0].data()[0], 30.0);
    }

    fn s(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = Tensor::matrix(1, 2, alloc::vec![1.0, -2.0]).unwrap();
        let g = Tensor::matrix(1, 2, alloc::vec![0.5, 0.25]).unwrap();
        let mut v = Tensor::zeros(&[1, 2]);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p.data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn velocity_decays_without_gradient() {
        let mut p = s(0.0);
        let mut v = s(1.0);
        for k in 1..=3 {
            sgd_step(&mut p, &s(0.0), &mut v, 0.1, 0.9, 0.0).unwrap();
            assert!((v.item() - 0.9f64.powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn two_step_recurrence() {
        let mut p = s(1.0);
        let mut v = s(0.0);
        sgd_step(&mut p, &s(1.0), &mut v, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut p, &s(1.0), &mut v, 0.1, 0.9, 0.0).unwrap();
        assert!((p.item() - 0.71).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = s(1.0);
        let mut v = s(0.0);
        let g = Tensor::zeros(&[1, 2]);
        assert!(matches!(sgd_step(&mut p, &g, &mut v, 0.1, 0.9, 0.0), Err(Error::Shape { .. })));
    }

    #[test]
    fn schedule_examples() {
        let d = [150, 180, 210];
        assert_eq!(lr_schedule(0, 0.05, &d, 0.1), 0.05);
        assert!((lr_schedule(150, 0.05, &d, 0.1) - 0.005).abs() < 1e-15);
        assert!((lr_schedule(239, 0.05, &d, 0.1) - 0.00005).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for e in 0..240 {
            let lr = lr_schedule(e, 0.05, &d, 0.1);
            assert!(lr <= prev);
            prev = lr;
        }
    }
}
