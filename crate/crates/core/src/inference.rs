//! Fused prediction over the raw input and the overall attention region.

use image::RgbImage;
use ndarray::{Array1, Array4, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::attention::BoundingBox;
use crate::backbone::Preprocessor;
use crate::error::{Error, Result};
use crate::experts::{argmax, ScoreVector};
use crate::model::{ExpertModel, ForwardPass, ForwardSpec};
use crate::nn::softmax;

/// How constituent scores are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Mean of raw logits.
    #[default]
    Logits,
    /// Mean of per-constituent softmax probabilities.
    Softmax,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(FusionMode::Logits),
            "softmax" => Ok(FusionMode::Softmax),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionBundle {
    /// Experts in order, then the overall classifier, on the raw input.
    pub raw_scores: Vec<ScoreVector>,
    /// Same layout, on the overall attention region.
    pub region_scores: Vec<ScoreVector>,
    pub fused: Vec<f64>,
    pub label: usize,
    pub region_box: BoundingBox,
}

impl PredictionBundle {
    pub fn constituents(&self) -> impl Iterator<Item = &ScoreVector> {
        self.raw_scores.iter().chain(&self.region_scores)
    }
}

/// Element-wise mean of the constituents.
pub fn fuse(constituents: &[&ScoreVector], mode: FusionMode) -> Result<Vec<f64>> {
    let first = constituents
        .first()
        .ok_or_else(|| Error::EmptyInput("no score vectors to fuse".into()))?;
    let k = first.scores.len();
    let mut acc = Array1::<f64>::zeros(k);
    for sv in constituents {
        if sv.scores.len() != k {
            return Err(Error::Config("score vectors differ in length".into()));
        }
        let row = ArrayView1::from(&sv.scores);
        match mode {
            FusionMode::Logits => acc += &row,
            FusionMode::Softmax => acc += &softmax(row),
        }
    }
    acc /= constituents.len() as f64;
    Ok(acc.to_vec())
}

fn check_ready(model: &ExpertModel) -> Result<()> {
    if !model.is_trained() {
        return Err(Error::State(
            "model has not been trained or loaded from a checkpoint".into(),
        ));
    }
    Ok(())
}

fn scores_of(pass: &ForwardPass, n: usize, i: usize) -> Vec<ScoreVector> {
    let mut out: Vec<ScoreVector> = (0..n)
        .map(|e| pass.head(e).expect("all experts run").scores.row(i))
        .collect();
    out.push(pass.overall.as_ref().expect("overall runs").scores.row(i));
    out
}

/// Two evaluation-mode passes (raw, then overall attention region) per batch.
pub fn predict_fused(
    model: &ExpertModel,
    images: &Array4<f64>,
    mode: FusionMode,
) -> Result<Vec<PredictionBundle>> {
    check_ready(model)?;
    let n = model.expert_count();
    let spec = ForwardSpec::eval_all(n);
    let raw = model.forward(images, &spec)?;
    let regions = model.propose_regions(&raw, images, false)?;
    let region_input = regions.overall_batch();
    let second = model.forward(&region_input, &spec)?;
    (0..images.dim().0)
        .map(|i| {
            let raw_scores = scores_of(&raw, n, i);
            let region_scores = scores_of(&second, n, i);
            let all: Vec<&ScoreVector> = raw_scores.iter().chain(&region_scores).collect();
            let fused = fuse(&all, mode)?;
            Ok(PredictionBundle {
                label: argmax(&fused),
                raw_scores,
                region_scores,
                fused,
                region_box: regions.overall[i].bbox,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSource {
    Expert(usize),
    Overall,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputKind {
    Raw,
    Region,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreSource {
    pub head: HeadSource,
    pub input: InputKind,
}

/// One constituent of the fused prediction, per image.
pub fn predict_single(
    model: &ExpertModel,
    images: &Array4<f64>,
    source: ScoreSource,
) -> Result<Vec<ScoreVector>> {
    check_ready(model)?;
    let n = model.expert_count();
    let index = match source.head {
        HeadSource::Expert(e) if e < n => e,
        HeadSource::Expert(e) => {
            return Err(Error::Config(format!("expert {e} out of range for {n} experts")))
        }
        HeadSource::Overall => n,
    };
    let spec = ForwardSpec::eval_all(n);
    let mut pass = model.forward(images, &spec)?;
    if source.input == InputKind::Region {
        let regions = model.propose_regions(&pass, images, false)?;
        pass = model.forward(&regions.overall_batch(), &spec)?;
    }
    Ok((0..images.dim().0)
        .map(|i| scores_of(&pass, n, i).swap_remove(index))
        .collect())
}

/// Fused prediction over arbitrarily many images in fixed-size batches.
pub fn predict_images<'a>(
    model: &ExpertModel,
    pre: &Preprocessor,
    images: impl IntoIterator<Item = &'a RgbImage>,
    batch_size: usize,
    mode: FusionMode,
) -> Result<Vec<PredictionBundle>> {
    let images: Vec<&RgbImage> = images.into_iter().collect();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let batch = pre.batch(chunk.iter().copied());
        out.extend(predict_fused(model, &batch, mode)?);
    }
    Ok(out)
}

/// Single-source scores over many images, batched like [`predict_images`].
pub fn predict_images_single<'a>(
    model: &ExpertModel,
    pre: &Preprocessor,
    images: impl IntoIterator<Item = &'a RgbImage>,
    batch_size: usize,
    source: ScoreSource,
) -> Result<Vec<ScoreVector>> {
    let images: Vec<&RgbImage> = images.into_iter().collect();
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let batch = pre.batch(chunk.iter().copied());
        out.extend(predict_single(model, &batch, source)?);
    }
    Ok(out)
}
