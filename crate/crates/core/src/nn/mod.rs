//! Minimal CPU layer library with hand-written backward passes.
//!
//! Tensors are `ndarray` arrays in NCHW order. Every layer's `forward` is
//! pure and returns a cache; `backward` consumes the cache, accumulates
//! parameter gradients and returns the input gradient.

mod activation;
mod conv;
mod linear;
mod loss;
mod norm;
mod param;
mod pool;

use ndarray::Array4;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use activation::{elu, elu_backward, elu_forward, relu_backward, relu_forward};
pub use conv::{conv_output_size, Conv2d, ConvCache};
pub use linear::Linear;
pub use loss::{cross_entropy, log_softmax, softmax};
pub use norm::{BatchNorm2d, NormCache};
pub use param::{AnyParam, Param, Parameterized};
pub use pool::{MaxPool2d, PoolCache};

use crate::error::{Error, Result};

/// Whether normalisation layers use batch statistics or running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Architecture description of one backbone layer, independent of weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm,
    Relu,
    Elu,
    MaxPool {
        kernel: usize,
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    /// ResNet-style bottleneck block: 1×1 → 3×3 (strided) → 1×1 with a
    /// projection shortcut when shape changes.
    Bottleneck {
        mid: usize,
        out: usize,
        stride: usize,
    },
}

impl LayerSpec {
    pub fn is_convolutional(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Bottleneck { .. })
    }

    /// Shape trace through this layer for a `(channels, height, width)` input.
    pub fn output_shape(&self, (c, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let too_small = || Error::Config(format!("layer {self:?} does not fit a {h}x{w} input"));
        match *self {
            LayerSpec::Conv {
                out,
                kernel,
                stride,
                padding,
            } => {
                if h + 2 * padding < kernel || w + 2 * padding < kernel || stride == 0 {
                    return Err(too_small());
                }
                Ok((
                    out,
                    conv_output_size(h, kernel, stride, padding),
                    conv_output_size(w, kernel, stride, padding),
                ))
            }
            LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::Elu => Ok((c, h, w)),
            LayerSpec::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                if h + 2 * padding < kernel || w + 2 * padding < kernel || stride == 0 {
                    return Err(too_small());
                }
                let pool = MaxPool2d {
                    kernel,
                    stride,
                    padding,
                };
                let (ho, wo) = pool.output_hw(h, w);
                Ok((c, ho, wo))
            }
            LayerSpec::Bottleneck { out, stride, .. } => {
                if stride == 0 {
                    return Err(too_small());
                }
                Ok((
                    out,
                    conv_output_size(h, 3, stride, 1),
                    conv_output_size(w, 3, stride, 1),
                ))
            }
        }
    }

    pub fn build<R: Rng + ?Sized>(&self, in_channels: usize, rng: &mut R) -> Layer {
        match *self {
            LayerSpec::Conv {
                out,
                kernel,
                stride,
                padding,
            } => Layer::Conv(Conv2d::new(in_channels, out, kernel, stride, padding, rng)),
            LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm2d::new(in_channels)),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Elu => Layer::Elu,
            LayerSpec::MaxPool {
                kernel,
                stride,
                padding,
            } => Layer::MaxPool(MaxPool2d {
                kernel,
                stride,
                padding,
            }),
            LayerSpec::Bottleneck { mid, out, stride } => {
                let main = vec![
                    Layer::Conv(Conv2d::new(in_channels, mid, 1, 1, 0, rng)),
                    Layer::BatchNorm(BatchNorm2d::new(mid)),
                    Layer::Relu,
                    Layer::Conv(Conv2d::new(mid, mid, 3, stride, 1, rng)),
                    Layer::BatchNorm(BatchNorm2d::new(mid)),
                    Layer::Relu,
                    Layer::Conv(Conv2d::new(mid, out, 1, 1, 0, rng)),
                    Layer::BatchNorm(BatchNorm2d::new(out)),
                ];
                let shortcut = if stride != 1 || in_channels != out {
                    vec![
                        Layer::Conv(Conv2d::new(in_channels, out, 1, stride, 0, rng)),
                        Layer::BatchNorm(BatchNorm2d::new(out)),
                    ]
                } else {
                    Vec::new()
                };
                Layer::Residual(Box::new(Residual { main, shortcut }))
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Residual {
    pub main: Vec<Layer>,
    /// Empty means identity.
    pub shortcut: Vec<Layer>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    Relu,
    Elu,
    MaxPool(MaxPool2d),
    Residual(Box<Residual>),
}

#[derive(Clone, Debug)]
pub enum LayerCache {
    Conv(ConvCache),
    Norm(NormCache),
    Relu(Array4<f64>),
    Elu(Array4<f64>),
    Pool(PoolCache),
    Residual {
        main: Vec<LayerCache>,
        shortcut: Vec<LayerCache>,
        output: Array4<f64>,
    },
}

impl Layer {
    pub fn forward(&self, x: &Array4<f64>, mode: Mode) -> (Array4<f64>, LayerCache) {
        match self {
            Layer::Conv(conv) => {
                let (y, c) = conv.forward(x);
                (y, LayerCache::Conv(c))
            }
            Layer::BatchNorm(bn) => {
                let (y, c) = bn.forward(x, mode);
                (y, LayerCache::Norm(c))
            }
            Layer::Relu => {
                let y = relu_forward(x);
                (y.clone(), LayerCache::Relu(y))
            }
            Layer::Elu => {
                let y = elu_forward(x);
                (y.clone(), LayerCache::Elu(y))
            }
            Layer::MaxPool(pool) => {
                let (y, c) = pool.forward(x);
                (y, LayerCache::Pool(c))
            }
            Layer::Residual(block) => {
                let (main_out, main) = forward_seq(&block.main, x, mode);
                let (mut sum, shortcut) = if block.shortcut.is_empty() {
                    (x.clone(), Vec::new())
                } else {
                    forward_seq(&block.shortcut, x, mode)
                };
                sum += &main_out;
                let output = relu_forward(&sum);
                (
                    output.clone(),
                    LayerCache::Residual {
                        main,
                        shortcut,
                        output,
                    },
                )
            }
        }
    }

    pub fn backward(
        &mut self,
        cache: LayerCache,
        dy: &Array4<f64>,
        need_input_grad: bool,
    ) -> Option<Array4<f64>> {
        match (self, cache) {
            (Layer::Conv(conv), LayerCache::Conv(c)) => conv.backward(c, dy, need_input_grad),
            (Layer::BatchNorm(bn), LayerCache::Norm(c)) => Some(bn.backward(c, dy)),
            (Layer::Relu, LayerCache::Relu(y)) => need_input_grad.then(|| relu_backward(&y, dy)),
            (Layer::Elu, LayerCache::Elu(y)) => need_input_grad.then(|| elu_backward(&y, dy)),
            (Layer::MaxPool(pool), LayerCache::Pool(c)) => {
                need_input_grad.then(|| pool.backward(c, dy))
            }
            (
                Layer::Residual(block),
                LayerCache::Residual {
                    main,
                    shortcut,
                    output,
                },
            ) => {
                let d = relu_backward(&output, dy);
                let dmain = backward_seq(&mut block.main, main, &d, need_input_grad);
                let dshort = if block.shortcut.is_empty() {
                    Some(d)
                } else {
                    backward_seq(&mut block.shortcut, shortcut, &d, need_input_grad)
                };
                match (dmain, dshort) {
                    (Some(a), Some(b)) => Some(a + b),
                    _ => None,
                }
            }
            _ => panic!("layer/cache mismatch"),
        }
    }
}

impl Parameterized for Layer {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut dyn AnyParam)) {
        match self {
            Layer::Conv(c) => c.visit_params(f),
            Layer::BatchNorm(b) => b.visit_params(f),
            Layer::Residual(block) => {
                for l in block.main.iter_mut().chain(block.shortcut.iter_mut()) {
                    l.visit_params(f);
                }
            }
            Layer::Relu | Layer::Elu | Layer::MaxPool(_) => {}
        }
    }
}

pub fn forward_seq(layers: &[Layer], x: &Array4<f64>, mode: Mode) -> (Array4<f64>, Vec<LayerCache>) {
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers {
        let (y, c) = layer.forward(&cur, mode);
        caches.push(c);
        cur = y;
    }
    (cur, caches)
}

pub fn backward_seq(
    layers: &mut [Layer],
    caches: Vec<LayerCache>,
    dy: &Array4<f64>,
    need_input_grad: bool,
) -> Option<Array4<f64>> {
    let mut grad = dy.clone();
    let n = layers.len();
    for (i, (layer, cache)) in layers.iter_mut().zip(caches).enumerate().rev() {
        let need = need_input_grad || i > 0;
        match layer.backward(cache, &grad, need) {
            Some(g) => grad = g,
            None => {
                debug_assert!(i == 0 || n == 0);
                return None;
            }
        }
    }
    Some(grad)
}
