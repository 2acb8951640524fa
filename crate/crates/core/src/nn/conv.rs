use ndarray::{linalg::general_mat_mul, Array1, Array2, Array4, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::param::{AnyParam, Param, Parameterized};

/// 2-D convolution over NCHW batches, lowered to im2col + GEMM.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out_channels × (in_channels · kernel²)`
    pub weight: Param<ndarray::Ix2>,
    pub bias: Param<ndarray::Ix1>,
}

#[derive(Clone, Debug)]
pub struct ConvCache {
    cols: Vec<Array2<f64>>,
    in_shape: (usize, usize, usize, usize),
}

pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (size + 2 * padding - kernel) / stride + 1
}

impl Conv2d {
    /// He-normal initialised weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
        let weight = Array2::from_shape_fn((out_channels, fan_in), |_| normal.sample(rng));
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(weight),
            bias: Param::new(Array1::zeros(out_channels)),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_output_size(h, self.kernel, self.stride, self.padding),
            conv_output_size(w, self.kernel, self.stride, self.padding),
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, ConvCache) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (ho, wo) = self.output_hw(h, w);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let rows = c * self.kernel * self.kernel;
        let mut out = Array4::<f64>::zeros((b, self.out_channels, ho, wo));
        let mut cols = Vec::with_capacity(b);
        let plane = ho * wo;
        for (n, mut out_n) in out.axis_iter_mut(Axis(0)).enumerate() {
            let mut col = Array2::<f64>::zeros((rows, plane));
            im2col(
                &xs[n * c * h * w..(n + 1) * c * h * w],
                (c, h, w),
                self.kernel,
                self.stride,
                self.padding,
                (ho, wo),
                col.as_slice_mut().expect("fresh array"),
            );
            let dst = out_n.as_slice_mut().expect("fresh array");
            let mut dst2 = ndarray::ArrayViewMut2::from_shape((self.out_channels, plane), dst)
                .expect("shape matches");
            general_mat_mul(1.0, &self.weight.value, &col, 0.0, &mut dst2);
            for (mut row, &bias) in dst2.axis_iter_mut(Axis(0)).zip(self.bias.value.iter()) {
                row += bias;
            }
            cols.push(col);
        }
        (
            out,
            ConvCache {
                cols,
                in_shape: (b, c, h, w),
            },
        )
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    pub fn backward(
        &mut self,
        cache: ConvCache,
        dy: &Array4<f64>,
        need_input_grad: bool,
    ) -> Option<Array4<f64>> {
        let (b, c, h, w) = cache.in_shape;
        let (_, oc, ho, wo) = dy.dim();
        let plane = ho * wo;
        let dy = dy.as_standard_layout();
        let dys = dy.as_slice().expect("standard layout");
        let mut dx = need_input_grad.then(|| Array4::<f64>::zeros((b, c, h, w)));
        let mut dcol = Array2::<f64>::zeros((c * self.kernel * self.kernel, plane));
        for (n, col) in cache.cols.iter().enumerate() {
            let dy_n = ArrayView2::from_shape((oc, plane), &dys[n * oc * plane..(n + 1) * oc * plane])
                .expect("shape matches");
            general_mat_mul(1.0, &dy_n, &col.t(), 1.0, self.weight.grad_mut());
            {
                let db = self.bias.grad_mut();
                for (g, row) in db.iter_mut().zip(dy_n.axis_iter(Axis(0))) {
                    *g += row.sum();
                }
            }
            if let Some(dx) = dx.as_mut() {
                general_mat_mul(1.0, &self.weight.value.t(), &dy_n, 0.0, &mut dcol);
                let dxs = dx.as_slice_mut().expect("fresh array");
                col2im(
                    dcol.as_slice().expect("fresh array"),
                    (c, h, w),
                    self.kernel,
                    self.stride,
                    self.padding,
                    (ho, wo),
                    &mut dxs[n * c * h * w..(n + 1) * c * h * w],
                );
            }
        }
        dx
    }
}

impl Parameterized for Conv2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut dyn AnyParam)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

fn im2col(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    col: &mut [f64],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        *v = if ix >= 0 && ix < w as isize {
                            src_row[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    col: &[f64],
    (c, h, w): (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    (ho, wo): (usize, usize),
    x: &mut [f64],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
