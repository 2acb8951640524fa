use ndarray::{Array1, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use super::param::{AnyParam, Param, Parameterized};
use super::Mode;

/// Per-channel batch normalisation for NCHW tensors.
///
/// Running estimates are folded in when a training-mode pass is
/// backpropagated, so evaluation-only passes never move them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param<ndarray::Ix1>,
    pub beta: Param<ndarray::Ix1>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct NormCache {
    xhat: Array4<f64>,
    inv_std: Array1<f64>,
    batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(Array1::ones(channels)),
            beta: Param::new(Array1::zeros(channels)),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array4<f64>, mode: Mode) -> (Array4<f64>, NormCache) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels, "batch norm channel mismatch");
        let count = (b * h * w) as f64;
        let (mean, var, batch_stats) = match mode {
            Mode::Train => {
                let mut mean = Array1::<f64>::zeros(c);
                let mut var = Array1::<f64>::zeros(c);
                for ch in 0..c {
                    let lane = x.index_axis(Axis(1), ch);
                    let m = lane.sum() / count;
                    let v = lane.fold(0.0, |acc, &v| acc + (v - m) * (v - m)) / count;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let unbiased = if count > 1.0 {
                    &var * (count / (count - 1.0))
                } else {
                    var.clone()
                };
                (mean.clone(), var, Some((mean, unbiased)))
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone(), None),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = x.to_owned();
        let mut y = Array4::<f64>::zeros(x.dim());
        for ch in 0..c {
            let (m, s, g, bt) = (mean[ch], inv_std[ch], self.gamma.value[ch], self.beta.value[ch]);
            Zip::from(xhat.index_axis_mut(Axis(1), ch))
                .and(y.index_axis_mut(Axis(1), ch))
                .for_each(|xh, yv| {
                    *xh = (*xh - m) * s;
                    *yv = g * *xh + bt;
                });
        }
        (
            y,
            NormCache {
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    pub fn backward(&mut self, cache: NormCache, dy: &Array4<f64>) -> Array4<f64> {
        let (b, c, h, w) = dy.dim();
        let count = (b * h * w) as f64;
        let mut dx = Array4::<f64>::zeros(dy.dim());
        let train = cache.batch_stats.is_some();
        for ch in 0..c {
            let dyc = dy.index_axis(Axis(1), ch);
            let xh = cache.xhat.index_axis(Axis(1), ch);
            let sum_dy = dyc.sum();
            let sum_dy_xh = Zip::from(&dyc).and(&xh).fold(0.0, |a, &d, &x| a + d * x);
            self.gamma.grad_mut()[ch] += sum_dy_xh;
            self.beta.grad_mut()[ch] += sum_dy;
            let g = self.gamma.value[ch];
            let s = cache.inv_std[ch];
            let mut dxc = dx.index_axis_mut(Axis(1), ch);
            if train {
                let k = g * s / count;
                Zip::from(&mut dxc).and(&dyc).and(&xh).for_each(|o, &d, &x| {
                    *o = k * (count * d - sum_dy - x * sum_dy_xh);
                });
            } else {
                Zip::from(&mut dxc).and(&dyc).for_each(|o, &d| *o = g * s * d);
            }
        }
        if let Some((mean, var)) = cache.batch_stats {
            let m = self.momentum;
            self.running_mean = &self.running_mean * (1.0 - m) + &mean * m;
            self.running_var = &self.running_var * (1.0 - m) + &var * m;
        }
        dx
    }
}

impl Parameterized for BatchNorm2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut dyn AnyParam)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
