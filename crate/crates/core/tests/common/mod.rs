#![allow(dead_code)]

use fairsight::backbone::micro_descriptor;
use fairsight::experts::Pooling;
use fairsight::model::{ExpertModel, ModelConfig};
use fairsight::nn::{AnyParam, Parameterized};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Micro model on 8×8 inputs with experts on the last `n` of its 3 stages.
pub fn micro(n: usize, seed: u64) -> ExpertModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ExpertModel::new(
        micro_descriptor(),
        &ModelConfig {
            classes: 2,
            descriptor_len: 4,
            pooling: Pooling::Max,
            expert_stages: (3 - n..3).collect(),
            threshold: 0.5,
        },
        &mut rng,
    )
    .unwrap()
}

pub fn random_batch(b: usize, seed: u64) -> (Array4<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array4::from_shape_fn((b, 3, 8, 8), |_| rng.gen_range(-1.0..1.0));
    let targets = (0..b).map(|i| i % 2).collect();
    (x, targets)
}

pub fn values_of(visit: impl FnOnce(&mut dyn FnMut(&mut dyn AnyParam))) -> Vec<f64> {
    let mut out = Vec::new();
    visit(&mut |p| out.extend_from_slice(p.values()));
    out
}

pub fn all_values(model: &mut ExpertModel) -> Vec<f64> {
    values_of(|f| model.visit_params(f))
}

use fairsight::training::{step_gradients, step_loss, StepKind};

/// Steps of one mutual-learning iteration for `n` experts.
pub fn step_kinds(n: usize) -> Vec<StepKind> {
    std::iter::once(StepKind::Deepest)
        .chain((0..n - 1).rev().map(StepKind::Expert))
        .chain([StepKind::Joint, StepKind::Concat])
        .collect()
}

fn nudge(model: &mut ExpertModel, param: usize, elem: usize, delta: f64) {
    let mut i = 0;
    model.visit_params(&mut |p| {
        if i == param {
            p.values_mut()[elem] += delta;
        }
        i += 1;
    });
}

/// Worst relative error between analytic and central-difference gradients
/// on `samples` random coordinates that the step actually trains.
pub fn gradient_check(model: &ExpertModel, kind: StepKind, samples: usize, seed: u64) -> f64 {
    let (x, t) = random_batch(4, seed);
    let mut m = model.clone();
    m.clear_grads();
    step_gradients(&mut m, kind, &x, &t).unwrap();
    let mut coords = Vec::new();
    let mut grads = Vec::new();
    let mut i = 0;
    m.visit_params(&mut |p| {
        if let Some(g) = p.grad_slice() {
            for (e, &v) in g.iter().enumerate() {
                coords.push((i, e));
                grads.push(v);
            }
        }
        i += 1;
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let k = rng.gen_range(0..coords.len());
        let (p, e) = coords[k];
        let mut probe = model.clone();
        nudge(&mut probe, p, e, h);
        let up = step_loss(&probe, kind, &x, &t).unwrap();
        nudge(&mut probe, p, e, -2.0 * h);
        let down = step_loss(&probe, kind, &x, &t).unwrap();
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[k];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayView3};

/// Per-position dot product over channels.
pub fn cam_oracle(act: ArrayView3<f64>, w: ArrayView1<f64>) -> Array2<f64> {
    let (c, h, wd) = act.dim();
    let mut out = Array2::zeros((h, wd));
    for i in 0..h {
        for j in 0..wd {
            let mut s = 0.0;
            for k in 0..c {
                s += w[k] * act[(k, i, j)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

/// Corner-aligned bilinear interpolation written out per output pixel.
pub fn bilinear_oracle(src: ArrayView2<f64>, (oh, ow): (usize, usize)) -> Array2<f64> {
    let (h, w) = src.dim();
    let coord = |i: usize, n: usize, m: usize| {
        if m == 1 {
            (n as f64 - 1.0) / 2.0
        } else {
            i as f64 * (n as f64 - 1.0) / (m as f64 - 1.0)
        }
    };
    Array2::from_shape_fn((oh, ow), |(i, j)| {
        let (y, x) = (coord(i, h, oh), coord(j, w, ow));
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        (1.0 - fy) * (1.0 - fx) * src[(y0, x0)]
            + (1.0 - fy) * fx * src[(y0, x1)]
            + fy * (1.0 - fx) * src[(y1, x0)]
            + fy * fx * src[(y1, x1)]
    })
}

pub fn max_rel_err(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}
