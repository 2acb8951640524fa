//! The multi-expert model: one backbone, `N` expert heads attached at
//! increasing stage depths, and an overall classifier over the
//! concatenated descriptors.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_map, overall_map, region_from_map, AttentionRegion, MaskConfig, RegionSource,
};
use crate::backbone::{expert_spans, Backbone, BackboneDescriptor, BackboneTrace, ExpertSpan, FeatureMap};
use crate::error::{Error, Result};
use crate::experts::{concat_overall, split_overall, Compressed, Descriptor, ExpertHead, Pooling, ScoreBatch};
use crate::nn::{AnyParam, Linear, Mode, Parameterized};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub descriptor_len: usize,
    pub pooling: Pooling,
    /// Terminal stage of each expert, 0-based, strictly increasing.
    pub expert_stages: Vec<usize>,
    pub threshold: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpertModel {
    pub backbone: Backbone,
    pub spans: Vec<ExpertSpan>,
    pub heads: Vec<ExpertHead>,
    pub overall: Linear,
    pub mask: MaskConfig,
    trained: bool,
}

/// What to run in one forward pass and in which normalisation mode.
#[derive(Clone, Debug)]
pub struct ForwardSpec {
    pub experts: Vec<usize>,
    pub overall: bool,
    pub backbone_mode: Mode,
    /// Indexed by expert; only requested experts are read.
    pub head_modes: Vec<Mode>,
}

impl ForwardSpec {
    pub fn eval_all(n: usize) -> Self {
        Self {
            experts: (0..n).collect(),
            overall: true,
            backbone_mode: Mode::Eval,
            head_modes: vec![Mode::Eval; n],
        }
    }

    pub fn train_all(n: usize) -> Self {
        Self {
            experts: (0..n).collect(),
            overall: true,
            backbone_mode: Mode::Train,
            head_modes: vec![Mode::Train; n],
        }
    }
}

#[derive(Debug)]
pub struct HeadPass {
    pub compressed: Compressed,
    pub scores: ScoreBatch,
}

#[derive(Debug)]
pub struct OverallPass {
    pub descriptor: Descriptor,
    pub scores: ScoreBatch,
}

#[derive(Debug)]
pub struct ForwardPass {
    backbone: BackboneTrace,
    /// Indexed by expert.
    pub heads: Vec<Option<HeadPass>>,
    pub overall: Option<OverallPass>,
}

impl ForwardPass {
    pub fn head(&self, expert: usize) -> Option<&HeadPass> {
        self.heads.get(expert).and_then(Option::as_ref)
    }

    pub fn stage_outputs(&self) -> &[Array4<f64>] {
        &self.backbone.stage_outputs
    }
}

/// Attention regions for a batch: `experts[n][i]` is expert `n`'s region
/// for image `i`.
#[derive(Clone, Debug)]
pub struct RegionSet {
    pub experts: Vec<Vec<AttentionRegion>>,
    pub overall: Vec<AttentionRegion>,
    /// Normalised per-expert maps at input resolution, `[expert][image]`.
    pub expert_maps: Vec<Vec<Array2<f64>>>,
    /// Renormalised sum of the expert maps, per image.
    pub overall_maps: Vec<Array2<f64>>,
}

impl RegionSet {
    pub fn expert_batch(&self, expert: usize) -> Array4<f64> {
        stack_crops(&self.experts[expert])
    }

    pub fn overall_batch(&self) -> Array4<f64> {
        stack_crops(&self.overall)
    }
}

pub fn stack_crops(regions: &[AttentionRegion]) -> Array4<f64> {
    let views: Vec<_> = regions.iter().map(|r| r.crop.view()).collect();
    ndarray::stack(Axis(0), &views).expect("crops share the input resolution")
}

impl ExpertModel {
    pub fn new<R: Rng + ?Sized>(
        descriptor: BackboneDescriptor,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = Backbone::new(descriptor, rng)?;
        let spans = expert_spans(&config.expert_stages, backbone.stage_count())?;
        let mask = MaskConfig::new(config.threshold)?;
        let heads = spans
            .iter()
            .map(|span| {
                let channels = backbone.stages.stages[span.terminal_stage].channels;
                ExpertHead::new(channels, config.descriptor_len, config.classes, config.pooling, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let overall = Linear::new(spans.len() * config.descriptor_len, config.classes, rng);
        Ok(Self {
            backbone,
            spans,
            heads,
            overall,
            mask,
            trained: false,
        })
    }

    pub fn expert_count(&self) -> usize {
        self.heads.len()
    }

    pub fn classes(&self) -> usize {
        self.overall.outputs()
    }

    pub fn input_size(&self) -> (usize, usize) {
        let (_, h, w) = self.backbone.descriptor.input;
        (h, w)
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Marks the weights as ready for inference (set by training and
    /// checkpoint loading).
    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn forward(&self, x: &Array4<f64>, spec: &ForwardSpec) -> Result<ForwardPass> {
        let n = self.expert_count();
        if spec.experts.is_empty() {
            return Err(Error::Config("forward pass requests no experts".into()));
        }
        if let Some(&bad) = spec.experts.iter().find(|&&e| e >= n) {
            return Err(Error::Config(format!("expert {bad} out of range for {n} experts")));
        }
        if spec.overall && spec.experts.len() != n {
            return Err(Error::Config(
                "the overall classifier needs every expert".into(),
            ));
        }
        let deepest = spec
            .experts
            .iter()
            .map(|&e| self.spans[e].terminal_stage)
            .max()
            .expect("non-empty");
        let trace = self.backbone.forward(x, deepest, spec.backbone_mode)?;
        let mut heads: Vec<Option<HeadPass>> = (0..n).map(|_| None).collect();
        for &e in &spec.experts {
            let map = FeatureMap {
                data: trace.stage_outputs[self.spans[e].terminal_stage].clone(),
                expert: e,
            };
            let mode = spec.head_modes.get(e).copied().unwrap_or(Mode::Eval);
            let compressed = self.heads[e].compress(&map, mode)?;
            let scores = self.heads[e].classify(&compressed.descriptor)?;
            heads[e] = Some(HeadPass { compressed, scores });
        }
        let overall = if spec.overall {
            let descs: Vec<&Descriptor> = heads
                .iter()
                .map(|h| &h.as_ref().expect("all experts computed").compressed.descriptor)
                .collect();
            let descriptor = concat_overall(&descs, n)?;
            let scores = ScoreBatch {
                logits: self.overall.forward(&descriptor.values),
            };
            Some(OverallPass { descriptor, scores })
        } else {
            None
        };
        Ok(ForwardPass {
            backbone: trace,
            heads,
            overall,
        })
    }

    /// Backpropagates score gradients. Only components that receive a
    /// gradient accumulate one.
    pub fn backward(
        &mut self,
        pass: ForwardPass,
        expert_grads: Vec<(usize, Array2<f64>)>,
        overall_grad: Option<Array2<f64>>,
    ) {
        let n = self.expert_count();
        let mut dv: Vec<Option<Array2<f64>>> = vec![None; n];
        let add = |slot: &mut Option<Array2<f64>>, g: Array2<f64>| {
            *slot = Some(match slot.take() {
                Some(acc) => acc + g,
                None => g,
            });
        };
        if let (Some(g), Some(op)) = (overall_grad, pass.overall.as_ref()) {
            let dcat = self.overall.backward(&op.descriptor.values, &g);
            for (e, part) in split_overall(&dcat, n).into_iter().enumerate() {
                add(&mut dv[e], part);
            }
        }
        for (e, g) in expert_grads {
            let hp = pass.heads[e].as_ref().expect("gradient for a computed expert");
            let d = self.heads[e].classifier_backward(&hp.compressed.descriptor, &g);
            add(&mut dv[e], d);
        }
        let mut stage_grads: Vec<Option<Array4<f64>>> = vec![None; self.backbone.stage_count()];
        for (e, head_pass) in pass.heads.into_iter().enumerate() {
            let (Some(hp), Some(d)) = (head_pass, dv[e].take()) else {
                continue;
            };
            let dx = self.heads[e].compress_backward(hp.compressed.cache, &d);
            let slot = &mut stage_grads[self.spans[e].terminal_stage];
            *slot = Some(match slot.take() {
                Some(acc) => acc + dx,
                None => dx,
            });
        }
        self.backbone.backward(pass.backbone, stage_grads);
    }

    /// Normalised CAMs and crops for every requested expert, plus the
    /// overall region, from an existing pass. `images` is the batch the pass
    /// consumed. Per-expert crops are skipped when `expert_crops` is false.
    pub fn propose_regions(
        &self,
        pass: &ForwardPass,
        images: &Array4<f64>,
        expert_crops: bool,
    ) -> Result<RegionSet> {
        let (b, _, h, w) = images.dim();
        let computed: Vec<usize> = (0..self.expert_count())
            .filter(|&e| pass.heads[e].is_some())
            .collect();
        let mut expert_maps = vec![Vec::with_capacity(b); self.expert_count()];
        let mut experts = vec![Vec::new(); self.expert_count()];
        for &e in &computed {
            let hp = pass.heads[e].as_ref().expect("filtered");
            let predicted = hp.scores.predicted();
            let act = &hp.compressed.activation.data;
            for (i, &k) in predicted.iter().enumerate() {
                let weights = self.heads[e].classifier.weight.value.row(k);
                let map = attention_map(act.index_axis(Axis(0), i), weights, (h, w))?;
                if expert_crops {
                    experts[e].push(region_from_map(
                        map.normalized.view(),
                        images.index_axis(Axis(0), i),
                        self.mask,
                        RegionSource::Expert(e),
                    )?);
                }
                expert_maps[e].push(map.normalized);
            }
        }
        let mut overall = Vec::with_capacity(b);
        let mut overall_maps = Vec::with_capacity(b);
        for i in 0..b {
            let maps: Vec<_> = computed.iter().map(|&e| expert_maps[e][i].view()).collect();
            let combined = overall_map(&maps)?;
            overall.push(region_from_map(
                combined.view(),
                images.index_axis(Axis(0), i),
                self.mask,
                RegionSource::Overall,
            )?);
            overall_maps.push(combined);
        }
        Ok(RegionSet {
            experts,
            overall,
            expert_maps,
            overall_maps,
        })
    }

    /// Parameters touched when expert `e` is trained alone.
    pub fn visit_expert_params(&mut self, e: usize, f: &mut dyn FnMut(&mut dyn AnyParam)) {
        self.backbone.visit_prefix_params(self.spans[e].terminal_stage, f);
        self.heads[e].visit_params(f);
    }
}

impl Parameterized for ExpertModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut dyn AnyParam)) {
        self.backbone.visit_params(f);
        for head in &mut self.heads {
            head.visit_params(f);
        }
        self.overall.visit_params(f);
    }
}
