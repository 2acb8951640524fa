use ndarray::Array4;
use serde::{Deserialize, Serialize};

/// Max pooling; padded cells never win.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub struct PoolCache {
    argmax: Vec<usize>,
    in_shape: (usize, usize, usize, usize),
}

impl MaxPool2d {
    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<f64>) -> (Array4<f64>, PoolCache) {
        let (b, c, h, w) = x.dim();
        let (ho, wo) = self.output_hw(h, w);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array4::<f64>::zeros((b, c, ho, wo));
        let os = out.as_slice_mut().expect("fresh array");
        let mut argmax = vec![0usize; os.len()];
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = base;
                    for ki in 0..self.kernel {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..self.kernel {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = base + iy as usize * w + ix as usize;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    os[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        (
            out,
            PoolCache {
                argmax,
                in_shape: (b, c, h, w),
            },
        )
    }

    pub fn backward(&self, cache: PoolCache, dy: &Array4<f64>) -> Array4<f64> {
        let mut dx = Array4::<f64>::zeros(cache.in_shape);
        let dxs = dx.as_slice_mut().expect("fresh array");
        let dy = dy.as_standard_layout();
        for (&src, &g) in cache.argmax.iter().zip(dy.iter()) {
            dxs[src] += g;
        }
        dx
    }
}
