use ndarray::{linalg::general_mat_mul, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::param::{AnyParam, Param, Parameterized};

/// Fully connected layer, `y = x · Wᵀ + b` over row-major batches.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    /// `out × in`
    pub weight: Param<ndarray::Ix2>,
    pub bias: Param<ndarray::Ix1>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        Self {
            weight: Param::new(Array2::from_shape_fn((outputs, inputs), |_| dist.sample(rng))),
            bias: Param::new(Array1::zeros(outputs)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = Array2::<f64>::zeros((x.nrows(), self.outputs()));
        general_mat_mul(1.0, x, &self.weight.value.t(), 0.0, &mut y);
        y += &self.bias.value;
        y
    }

    /// `x` is the forward input.
    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        general_mat_mul(1.0, &dy.t(), x, 1.0, self.weight.grad_mut());
        *self.bias.grad_mut() += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.value)
    }
}

impl Parameterized for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut dyn AnyParam)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
