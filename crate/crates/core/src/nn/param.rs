use ndarray::{Array, Dimension};
use serde::{Deserialize, Serialize};

/// A trainable tensor with its accumulated gradient and momentum buffer.
///
/// The gradient is `None` until something backpropagates into the parameter;
/// the optimizer only updates parameters that were actually reached.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(bound(
    serialize = "D: Serialize",
    deserialize = "D: Deserialize<'de>"
))]
pub struct Param<D: Dimension> {
    pub value: Array<f64, D>,
    #[serde(skip)]
    grad: Option<Array<f64, D>>,
    #[serde(skip)]
    velocity: Option<Array<f64, D>>,
}

impl<D: Dimension> Param<D> {
    pub fn new(value: Array<f64, D>) -> Self {
        Self {
            value,
            grad: None,
            velocity: None,
        }
    }

    pub fn grad(&self) -> Option<&Array<f64, D>> {
        self.grad.as_ref()
    }

    /// Gradient accumulator, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut Array<f64, D> {
        let dim = self.value.raw_dim();
        self.grad.get_or_insert_with(|| Array::zeros(dim))
    }
}

/// Type-erased view used by optimizers and gradient checks.
pub trait AnyParam {
    fn len(&self) -> usize;
    fn values(&self) -> &[f64];
    fn values_mut(&mut self) -> &mut [f64];
    fn grad_slice(&self) -> Option<&[f64]>;
    fn clear_grad(&mut self);
    /// SGD with momentum and L2 weight decay. No-op when no gradient arrived.
    fn sgd_update(&mut self, lr: f64, momentum: f64, weight_decay: f64);
    fn reset_velocity(&mut self);
}

impl<D: Dimension> AnyParam for Param<D> {
    fn len(&self) -> usize {
        self.value.len()
    }

    fn values(&self) -> &[f64] {
        self.value.as_slice().expect("parameters are contiguous")
    }

    fn values_mut(&mut self) -> &mut [f64] {
        self.value.as_slice_mut().expect("parameters are contiguous")
    }

    fn grad_slice(&self) -> Option<&[f64]> {
        self.grad.as_ref().map(|g| g.as_slice().expect("contiguous"))
    }

    fn clear_grad(&mut self) {
        self.grad = None;
    }

    fn sgd_update(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        let Some(grad) = self.grad.take() else {
            return;
        };
        let fresh = self.velocity.is_none();
        let dim = self.value.raw_dim();
        let value = self.value.as_slice_mut().expect("contiguous");
        let grad = grad.as_slice().expect("contiguous");
        let velocity = self.velocity.get_or_insert_with(|| Array::zeros(dim));
        let velocity = velocity.as_slice_mut().expect("contiguous");
        for ((p, &g), v) in value.iter_mut().zip(grad).zip(velocity.iter_mut()) {
            let d = g + weight_decay * *p;
            *v = if fresh { d } else { momentum * *v + d };
            *p -= lr * *v;
        }
    }

    fn reset_velocity(&mut self) {
        self.velocity = None;
    }
}

/// Anything that owns parameters.
pub trait Parameterized {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut dyn AnyParam));

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    fn clear_grads(&mut self) {
        self.visit_params(&mut |p| p.clear_grad());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sgd_skips_untouched_params() {
        let mut p = Param::new(array![1.0, 2.0]);
        p.sgd_update(0.1, 0.9, 0.5);
        assert_eq!(p.value, array![1.0, 2.0]);
    }

    #[test]
    fn sgd_matches_momentum_recurrence() {
        let mut p = Param::new(array![1.0]);
        *p.grad_mut() += &array![0.5];
        p.sgd_update(0.1, 0.9, 0.0);
        assert!((p.value[0] - 0.95).abs() < 1e-12);
        *p.grad_mut() += &array![0.5];
        p.sgd_update(0.1, 0.9, 0.0);
        // v = 0.9 * 0.5 + 0.5
        assert!((p.value[0] - (0.95 - 0.1 * 0.95)).abs() < 1e-12);
        assert!(p.grad().is_none());
    }
}
