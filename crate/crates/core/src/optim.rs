//! Adam with bias correction and a warmup / inverse-square-root schedule.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// Linear warmup to `peak` over `warmup` steps, then `peak * sqrt(warmup / step)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmupInverseSqrt {
    pub peak: f64,
    pub warmup: usize,
}

impl WarmupInverseSqrt {
    /// Learning rate for 1-based `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let step = step.max(1) as f64;
        if self.warmup == 0 {
            return self.peak;
        }
        let w = self.warmup as f64;
        self.peak * (step / w).min((w / step).sqrt())
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState<T: Scalar> {
    pub config: AdamConfig,
    step: usize,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>], config: AdamConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn moments(&self, i: usize) -> (&Tensor<T>, &Tensor<T>) {
        (&self.first[i], &self.second[i])
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<T: Scalar>(
    state: &mut OptimizerState<T>,
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::Shape(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first[i].shape() {
            return Err(Error::Shape(format!(
                "adam parameter {i}: {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let bc1 = T::of(1.0 - c.beta1.powi(t));
    let bc2 = T::of(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::of(lr), T::of(c.eps));
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *pi -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_and_zero_gradient_leave_params() {
        let mut p = vec![Tensor::from_vec(&[2], vec![1.0f64, -2.0])];
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut s, &mut p, &[Tensor::from_vec(&[2], vec![0.3, 0.4])], 0.0).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);

        let mut s = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut s, &mut p, &[Tensor::zeros(&[2])], 0.1).unwrap();
        assert_eq!(p[0].data(), &[1.0, -2.0]);
        assert!(s.moments(0).0.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m̂ = g, v̂ = g², so the update is lr * g / (|g| + eps).
        let mut p = vec![Tensor::from_vec(&[1], vec![1.0f64])];
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        adam_step(&mut s, &mut p, &[Tensor::from_vec(&[1], vec![1.0])], 0.1).unwrap();
        let expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut s = OptimizerState::new(&p, AdamConfig::default());
        assert!(adam_step(&mut s, &mut p, &[Tensor::zeros(&[3])], 0.1).is_err());
        assert!(adam_step(&mut s, &mut p, &[], 0.1).is_err());
    }

    #[test]
    fn schedule_peaks_at_warmup() {
        let s = WarmupInverseSqrt { peak: 1e-3, warmup: 400 };
        assert!((s.lr(200) - 5e-4).abs() < 1e-12);
        assert!((s.lr(400) - 1e-3).abs() < 1e-12);
        assert!((s.lr(1600) - 5e-4).abs() < 1e-12);
        assert_eq!(WarmupInverseSqrt { peak: 0.1, warmup: 0 }.lr(7), 0.1);
    }
}
