//! Staged convolutional backbones.
//!
//! A backbone is an ordered list of layers. Stages are maximal runs of
//! layers whose outputs share one spatial size; experts attach at stage
//! boundaries and reuse the shared prefix of a single forward pass.

use std::ops::Range;

use image::RgbImage;
use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AnyParam, Layer, LayerCache, LayerSpec, Mode, Parameterized};
use crate::resample::resize_channels;

/// Weight-free architecture description of a backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneDescriptor {
    pub name: String,
    /// `(channels, height, width)` of the preprocessed input.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
    /// Explicit stage ends (exclusive layer indices), overriding size-based grouping.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_ends: Option<Vec<usize>>,
}

impl BackboneDescriptor {
    /// Output shape of every layer, in order.
    pub fn shape_trace(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shape = self.input;
        let mut trace = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            shape = layer.output_shape(shape)?;
            trace.push(shape);
        }
        Ok(trace)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub layers: Range<usize>,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Grouping of backbone layers into stages, shallow to deep.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stages: Vec<Stage>,
}

impl StageSpec {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Index of the last layer of each stage.
    pub fn boundaries(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.layers.end - 1).collect()
    }

    pub fn spatial_sizes(&self) -> Vec<(usize, usize)> {
        self.stages.iter().map(|s| (s.height, s.width)).collect()
    }
}

/// Groups layers into maximal runs of equal output spatial size.
pub fn partition_stages(desc: &BackboneDescriptor) -> Result<StageSpec> {
    if !desc.layers.iter().any(LayerSpec::is_convolutional) {
        return Err(Error::UnsupportedBackbone(format!(
            "`{}` has no convolutional layers",
            desc.name
        )));
    }
    let trace = desc.shape_trace()?;
    let ends = match &desc.stage_ends {
        Some(ends) => {
            let ok = !ends.is_empty()
                && ends.windows(2).all(|w| w[0] < w[1])
                && ends[0] > 0
                && *ends.last().unwrap() == trace.len();
            if !ok {
                return Err(Error::Config(format!(
                    "explicit stage ends {ends:?} must strictly increase and end at {}",
                    trace.len()
                )));
            }
            ends.clone()
        }
        None => {
            let mut ends = Vec::new();
            for i in 1..trace.len() {
                if (trace[i].1, trace[i].2) != (trace[i - 1].1, trace[i - 1].2) {
                    ends.push(i);
                }
            }
            ends.push(trace.len());
            ends
        }
    };
    let mut stages = Vec::with_capacity(ends.len());
    let mut start = 0;
    for end in ends {
        let (c, h, w) = trace[end - 1];
        stages.push(Stage {
            layers: start..end,
            height: h,
            width: w,
            channels: c,
        });
        start = end;
    }
    for pair in stages.windows(2) {
        if pair[1].height > pair[0].height || pair[1].width > pair[0].width {
            return Err(Error::UnsupportedBackbone(format!(
                "`{}` grows spatially between stages ({}x{} -> {}x{})",
                desc.name, pair[0].height, pair[0].width, pair[1].height, pair[1].width
            )));
        }
    }
    Ok(StageSpec { stages })
}

/// Expert `expert` (0-based) ends at stage `terminal_stage` (0-based).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSpan {
    pub expert: usize,
    pub terminal_stage: usize,
}

/// Builds spans from terminal stage indices, checking they strictly increase
/// and that the deepest expert ends at the last stage.
pub fn expert_spans(terminal_stages: &[usize], stage_count: usize) -> Result<Vec<ExpertSpan>> {
    if terminal_stages.is_empty() {
        return Err(Error::Config("at least one expert is required".into()));
    }
    if terminal_stages.iter().any(|&s| s >= stage_count) {
        return Err(Error::Config(format!(
            "expert terminal stages {terminal_stages:?} exceed the {stage_count} available stages"
        )));
    }
    if !terminal_stages.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config(format!(
            "expert terminal stages {terminal_stages:?} must strictly increase"
        )));
    }
    if *terminal_stages.last().unwrap() != stage_count - 1 {
        return Err(Error::Config(
            "the deepest expert must end at the last stage".into(),
        ));
    }
    Ok(terminal_stages
        .iter()
        .enumerate()
        .map(|(expert, &terminal_stage)| ExpertSpan {
            expert,
            terminal_stage,
        })
        .collect())
}

/// Activations at one expert's terminal stage, NCHW.
#[derive(Clone, Debug)]
pub struct FeatureMap {
    pub data: Array4<f64>,
    pub expert: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn spatial(&self) -> (usize, usize) {
        (self.data.len_of(Axis(2)), self.data.len_of(Axis(3)))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Backbone {
    pub descriptor: BackboneDescriptor,
    pub stages: StageSpec,
    pub layers: Vec<Layer>,
}

/// Everything a backward pass needs from a forward pass.
#[derive(Debug)]
pub struct BackboneTrace {
    caches: Vec<LayerCache>,
    /// Output of each computed stage, shallow first.
    pub stage_outputs: Vec<Array4<f64>>,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(descriptor: BackboneDescriptor, rng: &mut R) -> Result<Self> {
        let stages = partition_stages(&descriptor)?;
        let mut channels = descriptor.input.0;
        let mut layers = Vec::with_capacity(descriptor.layers.len());
        let trace = descriptor.shape_trace()?;
        for (spec, out) in descriptor.layers.iter().zip(&trace) {
            layers.push(spec.build(channels, rng));
            channels = out.0;
        }
        Ok(Self {
            descriptor,
            stages,
            layers,
        })
    }

    pub fn stage_count(&self) -> usize {
        self.stages.stage_count()
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        let (b, c, h, w) = x.dim();
        if b == 0 {
            return Err(Error::EmptyInput("image batch has no images".into()));
        }
        if (c, h, w) != self.descriptor.input {
            return Err(Error::Config(format!(
                "input of shape {c}x{h}x{w} does not match backbone input {:?}",
                self.descriptor.input
            )));
        }
        Ok(())
    }

    /// Runs stages `0..=last_stage` only.
    pub fn forward(&self, x: &Array4<f64>, last_stage: usize, mode: Mode) -> Result<BackboneTrace> {
        self.check_input(x)?;
        if last_stage >= self.stage_count() {
            return Err(Error::Config(format!(
                "stage {last_stage} out of range for {} stages",
                self.stage_count()
            )));
        }
        let mut caches = Vec::new();
        let mut stage_outputs = Vec::with_capacity(last_stage + 1);
        let mut cur = x.clone();
        for stage in &self.stages.stages[..=last_stage] {
            for layer in &self.layers[stage.layers.clone()] {
                let (y, cache) = layer.forward(&cur, mode);
                caches.push(cache);
                cur = y;
            }
            stage_outputs.push(cur.clone());
        }
        Ok(BackboneTrace {
            caches,
            stage_outputs,
        })
    }

    /// One feature map per span from a single shared forward pass.
    pub fn forward_collect(
        &self,
        x: &Array4<f64>,
        spans: &[ExpertSpan],
        mode: Mode,
    ) -> Result<Vec<FeatureMap>> {
        let deepest = spans
            .iter()
            .map(|s| s.terminal_stage)
            .max()
            .ok_or_else(|| Error::Config("no expert spans given".into()))?;
        let trace = self.forward(x, deepest, mode)?;
        Ok(spans
            .iter()
            .map(|s| FeatureMap {
                data: trace.stage_outputs[s.terminal_stage].clone(),
                expert: s.expert,
            })
            .collect())
    }

    /// Backpropagates gradients arriving at stage outputs. `stage_grads[s]`
    /// is the gradient w.r.t. the output of stage `s`.
    pub fn backward(&mut self, trace: BackboneTrace, mut stage_grads: Vec<Option<Array4<f64>>>) {
        let computed = trace.stage_outputs.len();
        stage_grads.resize(computed, None);
        let mut caches = trace.caches;
        let mut grad: Option<Array4<f64>> = None;
        for s in (0..computed).rev() {
            if let Some(g) = stage_grads[s].take() {
                grad = Some(match grad {
                    Some(acc) => acc + g,
                    None => g,
                });
            }
            let range = self.stages.stages[s].layers.clone();
            for li in range.rev() {
                let cache = caches.pop().expect("one cache per computed layer");
                if let Some(g) = grad.take() {
                    grad = self.layers[li].backward(cache, &g, li > 0);
                }
            }
        }
    }

    /// Parameters of stages `0..=last_stage`.
    pub fn visit_prefix_params(&mut self, last_stage: usize, f: &mut dyn FnMut(&mut dyn AnyParam)) {
        let end = self.stages.stages[last_stage].layers.end;
        for layer in &mut self.layers[..end] {
            layer.visit_params(f);
        }
    }
}

impl Parameterized for Backbone {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut dyn AnyParam)) {
        for layer in &mut self.layers {
            layer.visit_params(f);
        }
    }
}

fn conv(out: usize, kernel: usize, stride: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv {
        out,
        kernel,
        stride,
        padding,
    }
}

fn pool2() -> LayerSpec {
    LayerSpec::MaxPool {
        kernel: 2,
        stride: 2,
        padding: 0,
    }
}

/// Five stages of conv-bn-relu, each halving resolution.
pub fn toy5_descriptor(input_size: usize, widths: [usize; 5]) -> BackboneDescriptor {
    let mut layers = vec![conv(widths[0], 3, 2, 1), LayerSpec::BatchNorm, LayerSpec::Relu];
    for &w in &widths[1..] {
        layers.extend([pool2(), conv(w, 3, 1, 1), LayerSpec::BatchNorm, LayerSpec::Relu]);
    }
    BackboneDescriptor {
        name: "toy5".into(),
        input: (3, input_size, input_size),
        layers,
        stage_ends: None,
    }
}

/// Three 4-channel stages on 8×8 inputs (432 parameters).
pub fn micro_descriptor() -> BackboneDescriptor {
    let mut layers = vec![conv(4, 3, 1, 1), LayerSpec::BatchNorm, LayerSpec::Relu];
    for _ in 0..2 {
        layers.extend([pool2(), conv(4, 3, 1, 1), LayerSpec::BatchNorm, LayerSpec::Relu]);
    }
    BackboneDescriptor {
        name: "micro".into(),
        input: (3, 8, 8),
        layers,
        stage_ends: None,
    }
}

/// ResNet50 without its classifier: stem, max-pool and four bottleneck groups.
pub fn resnet50_descriptor(input_size: usize) -> BackboneDescriptor {
    let mut layers = vec![
        conv(64, 7, 2, 3),
        LayerSpec::BatchNorm,
        LayerSpec::Relu,
        LayerSpec::MaxPool {
            kernel: 3,
            stride: 2,
            padding: 1,
        },
    ];
    for (blocks, mid, first_stride) in [(3, 64, 1), (4, 128, 2), (6, 256, 2), (3, 512, 2)] {
        for i in 0..blocks {
            layers.push(LayerSpec::Bottleneck {
                mid,
                out: mid * 4,
                stride: if i == 0 { first_stride } else { 1 },
            });
        }
    }
    BackboneDescriptor {
        name: "resnet50".into(),
        input: (3, input_size, input_size),
        layers,
        stage_ends: None,
    }
}

/// Resolves a backbone by configuration name.
pub fn descriptor_by_name(name: &str, input_size: usize) -> Result<BackboneDescriptor> {
    match name {
        "toy5" => Ok(toy5_descriptor(input_size, [8, 16, 24, 32, 32])),
        "micro" => {
            if input_size != 8 {
                return Err(Error::Config("the micro backbone takes 8x8 inputs".into()));
            }
            Ok(micro_descriptor())
        }
        "resnet50" => Ok(resnet50_descriptor(input_size)),
        other => Err(Error::UnsupportedBackbone(format!("unknown backbone `{other}`"))),
    }
}

/// Square resize plus per-channel standardisation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub size: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Preprocessor {
    pub fn image(&self, img: &RgbImage) -> Array3<f64> {
        let (w, h) = img.dimensions();
        let raw = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        let mut out = resize_channels(raw.view(), (self.size, self.size));
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            plane.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    pub fn batch<'a>(&self, images: impl IntoIterator<Item = &'a RgbImage>) -> Array4<f64> {
        let planes: Vec<Array3<f64>> = images.into_iter().map(|i| self.image(i)).collect();
        stack_images(&planes)
    }
}

/// Stacks `(C, H, W)` images into an NCHW batch.
pub fn stack_images(images: &[Array3<f64>]) -> Array4<f64> {
    let views: Vec<_> = images.iter().map(|i| i.view()).collect();
    ndarray::stack(Axis(0), &views).expect("images share a shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resnet50_groups_into_five_stages() {
        let spec = partition_stages(&resnet50_descriptor(448)).unwrap();
        assert_eq!(spec.stage_count(), 5);
        assert_eq!(
            spec.spatial_sizes(),
            vec![(224, 224), (112, 112), (56, 56), (28, 28), (14, 14)]
        );
        let spans = expert_spans(&[2, 3, 4], spec.stage_count()).unwrap();
        assert_eq!(spans[2].terminal_stage, 4);
    }

    #[test]
    fn constant_size_network_is_one_stage() {
        let desc = BackboneDescriptor {
            name: "flat".into(),
            input: (3, 8, 8),
            layers: vec![conv(4, 3, 1, 1), LayerSpec::Relu, conv(4, 3, 1, 1)],
            stage_ends: None,
        };
        let spec = partition_stages(&desc).unwrap();
        assert_eq!(spec.stage_count(), 1);
        assert_eq!(spec.stages[0].layers, 0..3);
    }

    #[test]
    fn non_convolutional_backbone_is_rejected() {
        let desc = BackboneDescriptor {
            name: "pool-only".into(),
            input: (3, 8, 8),
            layers: vec![pool2()],
            stage_ends: None,
        };
        assert!(matches!(
            partition_stages(&desc),
            Err(Error::UnsupportedBackbone(_))
        ));
    }

    #[test]
    fn explicit_stage_ends_override_sizes() {
        let mut desc = micro_descriptor();
        desc.stage_ends = Some(vec![7, 11]);
        let spec = partition_stages(&desc).unwrap();
        assert_eq!(spec.stage_count(), 2);
        desc.stage_ends = Some(vec![7, 9]);
        assert!(partition_stages(&desc).is_err());
    }

    #[test]
    fn span_validation() {
        assert!(expert_spans(&[2, 3, 4], 5).is_ok());
        assert!(expert_spans(&[3, 2, 4], 5).is_err());
        assert!(expert_spans(&[2, 3], 5).is_err());
        assert!(expert_spans(&[2, 5], 5).is_err());
        assert!(expert_spans(&[], 5).is_err());
    }

    #[test]
    fn forward_collect_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bb = Backbone::new(micro_descriptor(), &mut rng).unwrap();
        let spans = expert_spans(&[0, 1, 2], 3).unwrap();
        let empty = Array4::<f64>::zeros((0, 3, 8, 8));
        assert!(matches!(
            bb.forward_collect(&empty, &spans, Mode::Eval),
            Err(Error::EmptyInput(_))
        ));
        let bad = [ExpertSpan {
            expert: 0,
            terminal_stage: 7,
        }];
        let x = Array4::<f64>::zeros((1, 3, 8, 8));
        assert!(matches!(
            bb.forward_collect(&x, &bad, Mode::Eval),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn preprocessing_standardises_channels() {
        let img = RgbImage::from_pixel(4, 4, image::Rgb([255, 0, 51]));
        let pre = Preprocessor {
            size: 2,
            mean: [0.5, 0.0, 0.1],
            std: [0.5, 1.0, 0.1],
        };
        let t = pre.image(&img);
        assert_eq!(t.dim(), (3, 2, 2));
        assert!((t[[0, 0, 0]] - 1.0).abs() < 1e-12);
        assert!(t[[1, 1, 1]].abs() < 1e-12);
        assert!((t[[2, 0, 1]] - 1.0).abs() < 1e-9);
    }
}
