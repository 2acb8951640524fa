use ndarray::{Array4, Zip};

/// Rectified linear unit; caches the output for the backward mask.
pub fn relu_forward(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(output: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(output).for_each(|d, &y| {
        if y <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// ELU with alpha = 1. Bounded below by -1.
pub fn elu_forward(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(elu)
}

#[inline]
pub fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

pub fn elu_backward(output: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(output).for_each(|d, &y| {
        if y <= 0.0 {
            *d *= y + 1.0;
        }
    });
    dx
}
