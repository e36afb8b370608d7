use std::cell::RefCell;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// A named trainable tensor together with its Adam moments.
#[derive(Debug, Clone)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: RefCell<Option<Tensor<T>>>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
            grad: RefCell::new(None),
            step_count: 0,
        }
    }

    pub fn grad(&self) -> Option<Tensor<T>> {
        self.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.grad.borrow_mut() = None;
    }

    /// True when a gradient is present and has at least one nonzero entry.
    pub fn has_nonzero_grad(&self) -> bool {
        self.grad.borrow().as_ref().is_some_and(|g| g.data().iter().any(|&v| v != T::zero()))
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    /// Applies one update to each parameter. Gradients are left in place;
    /// resetting them is the caller's job.
    pub fn step<'a, T: Real>(&self, params: impl IntoIterator<Item = &'a mut Parameter<T>>, lr: f64) -> Result<()> {
        for p in params {
            let grad = p.grad.borrow();
            let Some(g) = grad.as_ref() else {
                return Err(Error::Contract(format!("parameter `{}` has no gradient", p.name)));
            };
            let t = (p.step_count + 1) as i32;
            let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
            let c1 = T::lit(1.0 - self.beta1.powi(t));
            let c2 = T::lit(1.0 - self.beta2.powi(t));
            let (lr, eps) = (T::lit(lr), T::lit(self.eps));
            let (one, gd) = (T::one(), g.data());
            let m = p.adam_m.data_mut();
            for (mi, &gi) in m.iter_mut().zip(gd) {
                *mi = b1 * *mi + (one - b1) * gi;
            }
            let v = p.adam_v.data_mut();
            for (vi, &gi) in v.iter_mut().zip(gd) {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            }
            let (m, v) = (p.adam_m.data(), p.adam_v.data());
            let values = p.value.data_mut();
            for ((w, &mi), &vi) in values.iter_mut().zip(m).zip(v) {
                *w -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
            drop(grad);
            p.step_count += 1;
        }
        Ok(())
    }
}

/// Cosine learning-rate decay from `base_lr` at epoch 0 to zero at
/// `total_epochs`.
pub fn cosine_lr(base_lr: f64, epoch: f64, total_epochs: f64) -> f64 {
    if total_epochs <= 0.0 {
        return base_lr;
    }
    let progress = (epoch / total_epochs).clamp(0.0, 1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Parameter<f64> {
        Parameter::new("x", Tensor::new(&[1], vec![v]).unwrap())
    }

    #[test]
    fn zero_gradient_leaves_value_but_counts_step() {
        let mut p = scalar_param(3.0);
        *p.grad.borrow_mut() = Some(Tensor::zeros(&[1]));
        Adam::default().step([&mut p], 0.1).unwrap();
        assert_eq!(p.value.data(), &[3.0]);
        assert_eq!(p.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(1.0);
        let adam = Adam::default();
        *p.grad.borrow_mut() = Some(Tensor::full(&[1], 1.0));
        adam.step([&mut p], 0.1).unwrap();
        // mhat = 1, vhat = 1, so the update is lr / (1 + eps)
        assert!((p.value.data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
        adam.step([&mut p], 0.1).unwrap();
        assert_eq!(p.step_count, 2);
        assert!(p.grad().is_some(), "grads are not reset by the optimizer");
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut p = scalar_param(1.0);
        assert!(matches!(Adam::default().step([&mut p], 0.1), Err(Error::Contract(_))));
    }

    #[test]
    fn defaults_are_the_standard_setting() {
        let a = Adam::default();
        assert_eq!((a.beta1, a.beta2, a.eps), (0.9, 0.999, 1e-8));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.001, 0.0, 40.0), 0.001);
        assert!(cosine_lr(0.001, 40.0, 40.0).abs() < 1e-18);
        assert!((cosine_lr(0.001, 20.0, 40.0) - 0.0005).abs() < 1e-15);
    }
}
