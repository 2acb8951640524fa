//! Multi-step mutual learning.
//!
//! Every batch runs `N + 2` optimisation steps: the deepest expert on the raw
//! input (which also proposes this iteration's attention regions), the
//! shallower experts from deep to shallow on inputs drawn from the region
//! pool, all heads jointly on the overall region, and finally the overall
//! classifier on the raw input.

use image::RgbImage;
use ndarray::{Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Preprocessor;
use crate::error::{Error, Result};
use crate::inference::{predict_fused, predict_single, FusionMode, HeadSource, InputKind, ScoreSource};
use crate::model::{stack_crops, ExpertModel, ForwardSpec, RegionSet};
use crate::nn::{cross_entropy, Mode, Parameterized};

/// A labelled training image. Carries no protected attributes.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: RgbImage,
    pub target: usize,
}

/// Which inputs the shallow steps may draw from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolPolicy {
    /// `{raw, A_1, …, A_N}`
    #[default]
    IncludeAll,
    /// Drops the trained expert's own region.
    ExcludeSelf,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DrawGranularity {
    /// One draw per step, shared by the whole batch.
    #[default]
    PerBatch,
    PerImage,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Mutual,
    /// Plain cross-entropy on the deepest expert only.
    Baseline,
}

macro_rules! from_str_snake {
    ($ty:ty, $($name:literal => $variant:expr),+ $(,)?) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

from_str_snake!(PoolPolicy, "include_all" => PoolPolicy::IncludeAll, "exclude_self" => PoolPolicy::ExcludeSelf);
from_str_snake!(DrawGranularity, "per_batch" => DrawGranularity::PerBatch, "per_image" => DrawGranularity::PerImage);
from_str_snake!(Scheme, "mutual" => Scheme::Mutual, "baseline" => Scheme::Baseline);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub pool_policy: PoolPolicy,
    pub draw: DrawGranularity,
    pub scheme: Scheme,
    pub fusion: FusionMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 16,
            epochs: 30,
            patience: 5,
            seed: 0,
            pool_policy: PoolPolicy::IncludeAll,
            draw: DrawGranularity::PerBatch,
            scheme: Scheme::Mutual,
            fusion: FusionMode::Logits,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if !(self.learning_rate > 0.0) {
            errors.push(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            errors.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            errors.push(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            errors.push("batch size must be >= 1".into());
        }
        if self.epochs == 0 {
            errors.push("epoch budget must be >= 1".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }
}

/// SGD with momentum and weight decay; updates only parameters that
/// received a gradient in the current step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Sgd {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn step(&self, model: &mut ExpertModel) {
        let (lr, m, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        model.visit_params(&mut |p| p.sgd_update(lr, m, wd));
    }
}

/// Cosine-annealed rate for 0-based `epoch` of `epochs`, no restarts.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return base;
    }
    0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Expert(usize),
    Joint,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    Raw,
    Region(usize),
    Overall,
    /// Per-image draws.
    Mixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 1-based position within the iteration.
    pub step: usize,
    pub component: Component,
    pub source: InputSource,
    /// Iteration whose first step produced the regions consumed here.
    pub regions_from: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub records: Vec<TraceRecord>,
}

impl IterationTrace {
    /// Checks the mandated order `e_N, e_{N−1}, …, e_1, joint, concat`.
    pub fn verify(&self, experts: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Sequencing(msg));
        if self.records.len() != experts + 2 {
            return fail(format!(
                "iteration {} ran {} steps, expected {}",
                self.iteration,
                self.records.len(),
                experts + 2
            ));
        }
        for (i, r) in self.records.iter().enumerate() {
            let expected = if i < experts {
                Component::Expert(experts - 1 - i)
            } else if i == experts {
                Component::Joint
            } else {
                Component::Concat
            };
            if r.step != i + 1 || r.component != expected {
                return fail(format!("step {} trained {:?}, expected {expected:?}", i + 1, r.component));
            }
            let source_ok = match i {
                0 => r.source == InputSource::Raw,
                _ if i == experts => r.source == InputSource::Overall,
                _ if i == experts + 1 => r.source == InputSource::Raw,
                _ => true,
            };
            if !source_ok {
                return fail(format!("step {} consumed {:?}", i + 1, r.source));
            }
            if i > 0 && r.source != InputSource::Raw && r.regions_from != Some(self.iteration) {
                return fail(format!(
                    "step {} consumed regions from iteration {:?}",
                    i + 1,
                    r.regions_from
                ));
            }
        }
        Ok(())
    }
}

/// Loss definition of each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    /// Deepest expert on the raw input; proposes regions.
    Deepest,
    /// Expert `n` alone.
    Expert(usize),
    /// All experts plus the overall classifier, summed.
    Joint,
    /// Overall classifier only.
    Concat,
}

#[derive(Debug)]
pub struct StepResult {
    pub loss: f64,
    /// Individual cross-entropy terms making up `loss`.
    pub terms: Vec<f64>,
    pub regions: Option<RegionSet>,
}

fn step_spec(model: &ExpertModel, kind: StepKind) -> Result<ForwardSpec> {
    let n = model.expert_count();
    Ok(match kind {
        StepKind::Deepest => {
            let mut head_modes = vec![Mode::Eval; n];
            head_modes[n - 1] = Mode::Train;
            ForwardSpec {
                experts: (0..n).collect(),
                overall: false,
                backbone_mode: Mode::Train,
                head_modes,
            }
        }
        StepKind::Expert(e) => {
            if e >= n {
                return Err(Error::Config(format!("expert {e} out of range for {n} experts")));
            }
            let mut head_modes = vec![Mode::Eval; n];
            head_modes[e] = Mode::Train;
            ForwardSpec {
                experts: vec![e],
                overall: false,
                backbone_mode: Mode::Train,
                head_modes,
            }
        }
        StepKind::Joint | StepKind::Concat => ForwardSpec::train_all(n),
    })
}

fn check_batch(model: &ExpertModel, input: &Array4<f64>, targets: &[usize]) -> Result<()> {
    if input.dim().0 == 0 {
        return Err(Error::EmptyInput("training batch has no images".into()));
    }
    if input.dim().0 != targets.len() {
        return Err(Error::Config(format!(
            "{} images but {} targets",
            input.dim().0,
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= model.classes()) {
        return Err(Error::Validation(vec![format!(
            "target {t} outside the {} model classes",
            model.classes()
        )]));
    }
    Ok(())
}

struct Losses {
    terms: Vec<f64>,
    expert_grads: Vec<(usize, Array2<f64>)>,
    overall_grad: Option<Array2<f64>>,
}

fn losses(model: &ExpertModel, kind: StepKind, pass: &crate::model::ForwardPass, targets: &[usize]) -> Losses {
    let n = model.expert_count();
    let head_ce = |e: usize| cross_entropy(&pass.head(e).expect("computed").scores.logits, targets);
    let overall_ce = || cross_entropy(&pass.overall.as_ref().expect("computed").scores.logits, targets);
    let mut out = Losses {
        terms: Vec::new(),
        expert_grads: Vec::new(),
        overall_grad: None,
    };
    match kind {
        StepKind::Deepest | StepKind::Expert(_) => {
            let e = if let StepKind::Expert(e) = kind { e } else { n - 1 };
            let (l, g) = head_ce(e);
            out.terms.push(l);
            out.expert_grads.push((e, g));
        }
        StepKind::Joint => {
            for e in 0..n {
                let (l, g) = head_ce(e);
                out.terms.push(l);
                out.expert_grads.push((e, g));
            }
            let (l, g) = overall_ce();
            out.terms.push(l);
            out.overall_grad = Some(g);
        }
        StepKind::Concat => {
            let (l, g) = overall_ce();
            out.terms.push(l);
            out.overall_grad = Some(g);
        }
    }
    out
}

/// Forward-only loss of a step, with the same normalisation modes the step
/// trains under.
pub fn step_loss(model: &ExpertModel, kind: StepKind, input: &Array4<f64>, targets: &[usize]) -> Result<f64> {
    check_batch(model, input, targets)?;
    let pass = model.forward(input, &step_spec(model, kind)?)?;
    Ok(losses(model, kind, &pass, targets).terms.iter().sum())
}

/// Forward, loss and backward for one step; gradients are left in the
/// parameters for the optimiser.
pub fn step_gradients(
    model: &mut ExpertModel,
    kind: StepKind,
    input: &Array4<f64>,
    targets: &[usize],
) -> Result<StepResult> {
    check_batch(model, input, targets)?;
    let pass = model.forward(input, &step_spec(model, kind)?)?;
    let regions = match kind {
        StepKind::Deepest => Some(model.propose_regions(&pass, input, true)?),
        _ => None,
    };
    let Losses {
        terms,
        expert_grads,
        overall_grad,
    } = losses(model, kind, &pass, targets);
    let loss: f64 = terms.iter().sum();
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{kind:?} step (loss {loss})")));
    }
    model.backward(pass, expert_grads, overall_grad);
    Ok(StepResult { loss, terms, regions })
}

/// Step 1: trains `e_N` on the raw batch and returns the regions proposed
/// by every expert (computed before the update).
pub fn train_step_deepest(
    model: &mut ExpertModel,
    opt: &Sgd,
    images: &Array4<f64>,
    targets: &[usize],
) -> Result<(f64, RegionSet)> {
    let r = step_gradients(model, StepKind::Deepest, images, targets)?;
    opt.step(model);
    Ok((r.loss, r.regions.expect("deepest step proposes regions")))
}

/// Draws the input for shallow step `expert` from `{raw, A_1, …, A_N}`.
pub fn select_augmented_input<R: Rng + ?Sized>(
    raw: &Array4<f64>,
    regions: Option<&RegionSet>,
    expert: usize,
    policy: PoolPolicy,
    draw: DrawGranularity,
    rng: &mut R,
) -> Result<(Array4<f64>, InputSource)> {
    let regions = regions.ok_or_else(|| {
        Error::Sequencing("attention regions are missing; the deepest step must run first".into())
    })?;
    let mut pool = vec![InputSource::Raw];
    for e in 0..regions.experts.len() {
        if policy == PoolPolicy::ExcludeSelf && e == expert {
            continue;
        }
        if regions.experts[e].len() != raw.dim().0 {
            return Err(Error::Sequencing(format!("expert {e} proposed no regions this iteration")));
        }
        pool.push(InputSource::Region(e));
    }
    let pick = |src: InputSource, i: usize| match src {
        InputSource::Region(e) => regions.experts[e][i].crop.view(),
        _ => raw.index_axis(Axis(0), i),
    };
    match draw {
        DrawGranularity::PerBatch => {
            let src = pool[rng.gen_range(0..pool.len())];
            let batch = match src {
                InputSource::Region(e) => stack_crops(&regions.experts[e]),
                _ => raw.clone(),
            };
            Ok((batch, src))
        }
        DrawGranularity::PerImage => {
            let views: Vec<_> = (0..raw.dim().0)
                .map(|i| pick(pool[rng.gen_range(0..pool.len())], i))
                .collect();
            Ok((ndarray::stack(Axis(0), &views).expect("same shape"), InputSource::Mixed))
        }
    }
}

pub fn train_step_shallow(
    model: &mut ExpertModel,
    opt: &Sgd,
    expert: usize,
    input: &Array4<f64>,
    targets: &[usize],
) -> Result<f64> {
    let n = model.expert_count();
    if expert + 1 >= n {
        return Err(Error::Config(format!(
            "shallow steps train experts 0..{}, got {expert}",
            n.saturating_sub(1)
        )));
    }
    let r = step_gradients(model, StepKind::Expert(expert), input, targets)?;
    opt.step(model);
    Ok(r.loss)
}

pub fn train_step_joint(
    model: &mut ExpertModel,
    opt: &Sgd,
    regions: Option<&RegionSet>,
    targets: &[usize],
) -> Result<f64> {
    let regions = regions.ok_or_else(|| {
        Error::Sequencing("overall region is missing; the deepest step must run first".into())
    })?;
    let r = step_gradients(model, StepKind::Joint, &regions.overall_batch(), targets)?;
    opt.step(model);
    Ok(r.loss)
}

pub fn train_step_concat(model: &mut ExpertModel, opt: &Sgd, raw: &Array4<f64>, targets: &[usize]) -> Result<f64> {
    let r = step_gradients(model, StepKind::Concat, raw, targets)?;
    opt.step(model);
    Ok(r.loss)
}

#[derive(Debug)]
pub struct IterationOutcome {
    pub trace: IterationTrace,
    /// Loss of each step, in trace order.
    pub losses: Vec<f64>,
}

/// One batch worth of optimisation under `cfg.scheme`.
pub fn train_iteration<R: Rng + ?Sized>(
    model: &mut ExpertModel,
    opt: &Sgd,
    images: &Array4<f64>,
    targets: &[usize],
    cfg: &TrainConfig,
    iteration: usize,
    rng: &mut R,
) -> Result<IterationOutcome> {
    let n = model.expert_count();
    let mut trace = IterationTrace {
        iteration,
        records: Vec::with_capacity(n + 2),
    };
    let mut losses = Vec::with_capacity(n + 2);
    let record = |trace: &mut IterationTrace, component, source, fresh: bool| {
        let step = trace.records.len() + 1;
        trace.records.push(TraceRecord {
            step,
            component,
            source,
            regions_from: fresh.then_some(iteration),
        });
    };

    if cfg.scheme == Scheme::Baseline {
        let r = step_gradients(model, StepKind::Expert(n - 1), images, targets)?;
        opt.step(model);
        record(&mut trace, Component::Expert(n - 1), InputSource::Raw, false);
        losses.push(r.loss);
        return Ok(IterationOutcome { trace, losses });
    }

    let (loss, regions) = train_step_deepest(model, opt, images, targets)?;
    record(&mut trace, Component::Expert(n - 1), InputSource::Raw, false);
    losses.push(loss);

    for e in (0..n - 1).rev() {
        let (input, source) =
            select_augmented_input(images, Some(&regions), e, cfg.pool_policy, cfg.draw, rng)?;
        let loss = train_step_shallow(model, opt, e, &input, targets)?;
        record(&mut trace, Component::Expert(e), source, source != InputSource::Raw);
        losses.push(loss);
    }

    let loss = train_step_joint(model, opt, Some(&regions), targets)?;
    record(&mut trace, Component::Joint, InputSource::Overall, true);
    losses.push(loss);

    let loss = train_step_concat(model, opt, images, targets)?;
    record(&mut trace, Component::Concat, InputSource::Raw, false);
    losses.push(loss);

    trace.verify(n)?;
    Ok(IterationOutcome { trace, losses })
}

/// Names of the steps of one iteration, in order.
pub fn step_names(experts: usize, scheme: Scheme) -> Vec<String> {
    match scheme {
        Scheme::Baseline => vec![format!("expert{experts}")],
        Scheme::Mutual => (1..=experts)
            .rev()
            .map(|e| format!("expert{e}"))
            .chain(["joint".to_string(), "concat".to_string()])
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub steps: Vec<String>,
    /// Mean loss of each step over the epoch's batches.
    pub step_losses: Vec<f64>,
    pub val_accuracy: Option<f64>,
    pub batches: usize,
}

#[derive(Debug)]
pub struct FitOutcome {
    /// Weights from the epoch with the best validation accuracy.
    pub model: ExpertModel,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Percentage of `samples` classified correctly under `scheme`'s inference rule.
pub fn accuracy(
    model: &ExpertModel,
    samples: &[TrainSample],
    pre: &Preprocessor,
    batch_size: usize,
    scheme: Scheme,
    fusion: FusionMode,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("no samples to evaluate".into()));
    }
    let mut correct = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch = pre.batch(chunk.iter().map(|s| &s.image));
        let labels: Vec<usize> = match scheme {
            Scheme::Mutual => predict_fused(model, &batch, fusion)?.iter().map(|b| b.label).collect(),
            Scheme::Baseline => predict_single(
                model,
                &batch,
                ScoreSource {
                    head: HeadSource::Expert(model.expert_count() - 1),
                    input: InputKind::Raw,
                },
            )?
            .iter()
            .map(|s| s.predicted_class())
            .collect(),
        };
        correct += labels.iter().zip(chunk).filter(|(l, s)| **l == s.target).count();
    }
    Ok(100.0 * correct as f64 / samples.len() as f64)
}

/// Trains over epochs with cosine annealing and early stopping on
/// validation accuracy. `on_epoch` sees every record and the current weights.
pub fn fit(
    mut model: ExpertModel,
    train: &[TrainSample],
    val: &[TrainSample],
    pre: &Preprocessor,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ExpertModel) -> Result<()>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput("training set is empty".into()));
    }
    let bad: Vec<String> = train
        .iter()
        .chain(val)
        .enumerate()
        .filter(|(_, s)| s.target >= model.classes())
        .map(|(i, s)| format!("sample {i}: label {} outside {} classes", s.target, model.classes()))
        .collect();
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = model.expert_count();
    let steps = step_names(n, cfg.scheme);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ExpertModel)> = None;
    let mut since_best = 0;
    let mut iteration = 0;

    for epoch in 0..cfg.epochs {
        let mut opt = Sgd::from_config(cfg);
        opt.learning_rate = cosine_lr(cfg.learning_rate, epoch, cfg.epochs);
        order.shuffle(&mut rng);
        let mut sums = vec![0.0; steps.len()];
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let images = pre.batch(chunk.iter().map(|&i| &train[i].image));
            let targets: Vec<usize> = chunk.iter().map(|&i| train[i].target).collect();
            let out = train_iteration(&mut model, &opt, &images, &targets, cfg, iteration, &mut rng)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => {
                        Error::NonFinite(format!("epoch {epoch}, batch {batches}: {msg}"))
                    }
                    other => other,
                })?;
            for (s, l) in sums.iter_mut().zip(&out.losses) {
                *s += l;
            }
            batches += 1;
            iteration += 1;
        }
        model.mark_trained();
        let val_accuracy = if val.is_empty() {
            None
        } else {
            Some(accuracy(&model, val, pre, cfg.batch_size, cfg.scheme, cfg.fusion)?)
        };
        let record = EpochRecord {
            epoch,
            learning_rate: opt.learning_rate,
            steps: steps.clone(),
            step_losses: sums.iter().map(|s| s / batches as f64).collect(),
            val_accuracy,
            batches,
        };
        log::info!(
            "epoch {epoch}: lr {:.5} losses {:?} val {:?}",
            record.learning_rate,
            record.step_losses,
            record.val_accuracy
        );
        on_epoch(&record, &model)?;
        log.push(record);

        let score = val_accuracy.unwrap_or(f64::NEG_INFINITY);
        match &best {
            Some((b, _, _)) if score <= *b => since_best += 1,
            _ => {
                best = Some((score, epoch, model.clone()));
                since_best = 0;
            }
        }
        if val_accuracy.is_some() && since_best >= cfg.patience {
            log::info!("early stopping after epoch {epoch}");
            break;
        }
    }

    let (model, best_epoch) = match best {
        Some((_, epoch, m)) if !val.is_empty() => (m, epoch),
        _ => (model, log.len() - 1),
    };
    Ok(FitOutcome {
        model,
        log,
        best_epoch,
    })
}
