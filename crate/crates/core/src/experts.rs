//! Expert heads: descriptor compression, per-expert classifiers and the
//! concatenated overall descriptor.

use ndarray::{concatenate, s, Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::nn::{
    elu_backward, elu_forward, AnyParam, BatchNorm2d, Conv2d, ConvCache, Linear, Mode, NormCache,
    Parameterized,
};

/// Spatial pooling that turns `x''` into a descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Max,
    Avg,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Pooling::Max),
            "avg" => Ok(Pooling::Avg),
            other => Err(Error::Config(format!("unknown pooling `{other}`"))),
        }
    }
}

/// Batched descriptors, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor {
    pub values: Array2<f64>,
}

impl Descriptor {
    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.ncols() == 0
    }
}

/// Pre-softmax class scores for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
}

impl ScoreVector {
    /// Argmax; ties resolve to the lowest class index.
    pub fn predicted_class(&self) -> usize {
        argmax(&self.scores)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Scores for a batch, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreBatch {
    pub logits: Array2<f64>,
}

impl ScoreBatch {
    pub fn len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.nrows() == 0
    }

    pub fn row(&self, i: usize) -> ScoreVector {
        ScoreVector {
            scores: self.logits.row(i).to_vec(),
        }
    }

    pub fn predicted(&self) -> Vec<usize> {
        self.logits
            .rows()
            .into_iter()
            .map(|r| argmax(r.as_slice().expect("row-major")))
            .collect()
    }
}

/// `1×1 conv → BN → ELU → 3×3 conv → BN → ELU → pool`, then a linear classifier.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpertHead {
    pub reduce: Conv2d,
    pub reduce_norm: BatchNorm2d,
    pub expand: Conv2d,
    pub expand_norm: BatchNorm2d,
    pub classifier: Linear,
    pub pooling: Pooling,
}

#[derive(Debug)]
pub struct HeadCache {
    reduce: ConvCache,
    reduce_norm: NormCache,
    reduced: Array4<f64>,
    expand: ConvCache,
    expand_norm: NormCache,
    activation: Array4<f64>,
    argmax: Vec<usize>,
}

/// Output of [`ExpertHead::compress`].
#[derive(Debug)]
pub struct Compressed {
    pub descriptor: Descriptor,
    /// `x''`, the map CAMs are computed from.
    pub activation: FeatureMap,
    pub(crate) cache: HeadCache,
}

impl ExpertHead {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        descriptor_len: usize,
        classes: usize,
        pooling: Pooling,
        rng: &mut R,
    ) -> Result<Self> {
        if descriptor_len < 2 || descriptor_len % 2 != 0 {
            return Err(Error::Config(format!(
                "descriptor length must be an even number >= 2, got {descriptor_len}"
            )));
        }
        if classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        let half = descriptor_len / 2;
        Ok(Self {
            reduce: Conv2d::new(in_channels, half, 1, 1, 0, rng),
            reduce_norm: BatchNorm2d::new(half),
            expand: Conv2d::new(half, descriptor_len, 3, 1, 1, rng),
            expand_norm: BatchNorm2d::new(descriptor_len),
            classifier: Linear::new(descriptor_len, classes, rng),
            pooling,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.reduce.in_channels
    }

    pub fn descriptor_len(&self) -> usize {
        self.expand.out_channels
    }

    pub fn classes(&self) -> usize {
        self.classifier.outputs()
    }

    pub fn compress(&self, x: &FeatureMap, mode: Mode) -> Result<Compressed> {
        if x.channels() != self.in_channels() {
            return Err(Error::Config(format!(
                "expert {} head expects {} channels, feature map has {}",
                x.expert,
                self.in_channels(),
                x.channels()
            )));
        }
        let (a, reduce) = self.reduce.forward(&x.data);
        let (a, reduce_norm) = self.reduce_norm.forward(&a, mode);
        let reduced = elu_forward(&a);
        let (a, expand) = self.expand.forward(&reduced);
        let (a, expand_norm) = self.expand_norm.forward(&a, mode);
        let activation = elu_forward(&a);
        let (values, argmax) = pool(&activation, self.pooling);
        Ok(Compressed {
            descriptor: Descriptor { values },
            activation: FeatureMap {
                data: activation.clone(),
                expert: x.expert,
            },
            cache: HeadCache {
                reduce,
                reduce_norm,
                reduced,
                expand,
                expand_norm,
                activation,
                argmax,
            },
        })
    }

    pub fn classify(&self, v: &Descriptor) -> Result<ScoreBatch> {
        if v.len() != self.classifier.inputs() {
            return Err(Error::Config(format!(
                "descriptor of length {} does not fit a classifier of width {}",
                v.len(),
                self.classifier.inputs()
            )));
        }
        Ok(ScoreBatch {
            logits: self.classifier.forward(&v.values),
        })
    }

    /// Classifier backward; returns the descriptor gradient.
    pub(crate) fn classifier_backward(&mut self, v: &Descriptor, dscores: &Array2<f64>) -> Array2<f64> {
        self.classifier.backward(&v.values, dscores)
    }

    /// Descriptor gradient back to the feature map the head consumed.
    pub(crate) fn compress_backward(&mut self, cache: HeadCache, dv: &Array2<f64>) -> Array4<f64> {
        let d_act = unpool(&cache.activation, &cache.argmax, dv, self.pooling);
        let d = elu_backward(&cache.activation, &d_act);
        let d = self.expand_norm.backward(cache.expand_norm, &d);
        let d = self
            .expand
            .backward(cache.expand, &d, true)
            .expect("input grad requested");
        let d = elu_backward(&cache.reduced, &d);
        let d = self.reduce_norm.backward(cache.reduce_norm, &d);
        self.reduce
            .backward(cache.reduce, &d, true)
            .expect("input grad requested")
    }

    pub fn visit_compress_params(&mut self, f: &mut dyn FnMut(&mut dyn AnyParam)) {
        self.reduce.visit_params(f);
        self.reduce_norm.visit_params(f);
        self.expand.visit_params(f);
        self.expand_norm.visit_params(f);
    }
}

impl Parameterized for ExpertHead {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut dyn AnyParam)) {
        self.visit_compress_params(f);
        self.classifier.visit_params(f);
    }
}

/// Per-channel global pooling of a batch of maps into descriptors.
pub fn global_pool(x: &Array4<f64>, pooling: Pooling) -> Array2<f64> {
    pool(x, pooling).0
}

/// Global pooling over space; for max pooling also returns the winning
/// flat spatial index per (image, channel), first occurrence on ties.
fn pool(x: &Array4<f64>, pooling: Pooling) -> (Array2<f64>, Vec<usize>) {
    let (b, c, h, w) = x.dim();
    let plane = h * w;
    let xs = x.as_slice().expect("standard layout");
    let mut out = Array2::<f64>::zeros((b, c));
    let mut argmax = Vec::new();
    if pooling == Pooling::Max {
        argmax.reserve(b * c);
    }
    for n in 0..b {
        for ch in 0..c {
            let lane = &xs[(n * c + ch) * plane..(n * c + ch + 1) * plane];
            out[[n, ch]] = match pooling {
                Pooling::Max => {
                    let best = argmax_slice(lane);
                    argmax.push(best);
                    lane[best]
                }
                Pooling::Avg => lane.iter().sum::<f64>() / plane as f64,
            };
        }
    }
    (out, argmax)
}

fn argmax_slice(lane: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lane.iter().enumerate() {
        if v > lane[best] {
            best = i;
        }
    }
    best
}

fn unpool(x: &Array4<f64>, argmax: &[usize], dv: &Array2<f64>, pooling: Pooling) -> Array4<f64> {
    let (b, c, h, w) = x.dim();
    let plane = h * w;
    let mut dx = Array4::<f64>::zeros((b, c, h, w));
    let dxs = dx.as_slice_mut().expect("fresh array");
    for n in 0..b {
        for ch in 0..c {
            let base = (n * c + ch) * plane;
            let g = dv[[n, ch]];
            match pooling {
                Pooling::Max => dxs[base + argmax[n * c + ch]] += g,
                Pooling::Avg => {
                    for v in &mut dxs[base..base + plane] {
                        *v += g / plane as f64;
                    }
                }
            }
        }
    }
    dx
}

/// Concatenates per-expert descriptors in expert order.
pub fn concat_overall(descriptors: &[&Descriptor], expected: usize) -> Result<Descriptor> {
    if descriptors.len() != expected {
        return Err(Error::Config(format!(
            "expected {expected} descriptors, got {}",
            descriptors.len()
        )));
    }
    let first = descriptors
        .first()
        .ok_or_else(|| Error::Config("no descriptors to concatenate".into()))?;
    if descriptors
        .iter()
        .any(|d| d.len() != first.len() || d.values.nrows() != first.values.nrows())
    {
        return Err(Error::Config(
            "descriptors must share length and batch size".into(),
        ));
    }
    let views: Vec<_> = descriptors.iter().map(|d| d.values.view()).collect();
    Ok(Descriptor {
        values: concatenate(Axis(1), &views).expect("shapes checked"),
    })
}

/// Inverse of [`concat_overall`]: slices at descriptor boundaries.
pub fn split_overall(overall: &Array2<f64>, parts: usize) -> Vec<Array2<f64>> {
    let len = overall.ncols() / parts;
    (0..parts)
        .map(|i| overall.slice(s![.., i * len..(i + 1) * len]).to_owned())
        .collect()
}
