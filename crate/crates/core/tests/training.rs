mod common;

use common::{micro, random_batch, values_of};
use fairsight::experts::concat_overall;
use fairsight::model::ForwardSpec;
use fairsight::nn::{cross_entropy, Parameterized};
use fairsight::training::*;
use fairsight::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sgd() -> Sgd {
    Sgd::from_config(&TrainConfig::default())
}

fn trace_components(n: usize) -> Vec<Component> {
    let mut model = micro(n, 3);
    let (x, t) = random_batch(4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = train_iteration(&mut model, &sgd(), &x, &t, &TrainConfig::default(), 0, &mut rng).unwrap();
    out.trace.verify(n).unwrap();
    out.trace.records.iter().map(|r| r.component).collect()
}

#[test]
fn three_experts_run_five_steps_deep_to_shallow() {
    use Component::*;
    assert_eq!(trace_components(3), vec![Expert(2), Expert(1), Expert(0), Joint, Concat]);
}

#[test]
fn single_expert_runs_three_steps() {
    use Component::*;
    assert_eq!(trace_components(1), vec![Expert(0), Joint, Concat]);
}

#[test]
fn baseline_scheme_trains_the_deepest_head_only() {
    let mut model = micro(3, 3);
    let (x, t) = random_batch(4, 5);
    let cfg = TrainConfig {
        scheme: Scheme::Baseline,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = train_iteration(&mut model, &sgd(), &x, &t, &cfg, 0, &mut rng).unwrap();
    assert_eq!(out.trace.records.len(), 1);
    assert_eq!(out.trace.records[0].component, Component::Expert(2));
}

#[test]
fn deepest_step_returns_regions_for_every_expert() {
    let mut model = micro(1, 4);
    let (x, t) = random_batch(3, 6);
    let (loss, regions) = train_step_deepest(&mut model, &sgd(), &x, &t).unwrap();
    assert!(loss.is_finite() && loss >= 0.0);
    assert_eq!(regions.experts.len(), 1);
    assert_eq!(regions.overall.len(), 3);
    // one expert: the overall map is that expert's map renormalised
    for (a, b) in regions.expert_maps[0].iter().zip(&regions.overall_maps) {
        assert_eq!(regions.experts[0].len(), 3);
        for (p, q) in a.iter().zip(b) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}

#[test]
fn deepest_step_regions_use_pre_update_weights() {
    let mut model = micro(3, 4);
    let (x, t) = random_batch(4, 6);
    let before = model.clone();
    let (_, regions) = train_step_deepest(&mut model, &sgd(), &x, &t).unwrap();
    let first = step_gradients(&mut before.clone(), StepKind::Deepest, &x, &t).unwrap();
    let again = step_gradients(&mut before.clone(), StepKind::Deepest, &x, &t).unwrap();
    let boxes = |r: &fairsight::model::RegionSet| r.overall.iter().map(|a| a.bbox).collect::<Vec<_>>();
    assert_eq!(boxes(&regions), boxes(first.regions.as_ref().unwrap()));
    assert_eq!(boxes(&regions), boxes(again.regions.as_ref().unwrap()));
    assert_eq!(regions.overall_maps, first.regions.unwrap().overall_maps);
}

#[test]
fn empty_batch_is_rejected() {
    let mut model = micro(2, 1);
    let x = ndarray::Array4::zeros((0, 3, 8, 8));
    assert!(matches!(
        train_step_deepest(&mut model, &sgd(), &x, &[]),
        Err(Error::EmptyInput(_))
    ));
}

#[test]
fn pool_draws_are_uniform() {
    let mut model = micro(3, 8);
    let (x, t) = random_batch(2, 9);
    let (_, regions) = train_step_deepest(&mut model, &sgd(), &x, &t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut counts = [0usize; 4];
    let draws = 10_000;
    for _ in 0..draws {
        let (_, src) = select_augmented_input(
            &x,
            Some(&regions),
            1,
            PoolPolicy::IncludeAll,
            DrawGranularity::PerBatch,
            &mut rng,
        )
        .unwrap();
        counts[match src {
            InputSource::Raw => 0,
            InputSource::Region(e) => e + 1,
            other => panic!("{other:?}"),
        }] += 1;
    }
    for c in counts {
        let f = c as f64 / draws as f64;
        assert!((f - 0.25).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn exclude_self_drops_own_region() {
    let mut model = micro(3, 8);
    let (x, t) = random_batch(2, 9);
    let (_, regions) = train_step_deepest(&mut model, &sgd(), &x, &t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let (_, src) = select_augmented_input(
            &x,
            Some(&regions),
            0,
            PoolPolicy::ExcludeSelf,
            DrawGranularity::PerBatch,
            &mut rng,
        )
        .unwrap();
        assert_ne!(src, InputSource::Region(0));
    }
}

#[test]
fn pool_selection_replays_under_a_seed() {
    let mut model = micro(3, 8);
    let (x, t) = random_batch(2, 9);
    let (_, regions) = train_step_deepest(&mut model, &sgd(), &x, &t).unwrap();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..50)
            .map(|_| {
                select_augmented_input(&x, Some(&regions), 1, PoolPolicy::IncludeAll, DrawGranularity::PerBatch, &mut rng)
                    .unwrap()
                    .1
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}

#[test]
fn missing_regions_are_a_sequencing_error() {
    let mut model = micro(2, 1);
    let (x, t) = random_batch(2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = select_augmented_input(&x, None, 0, PoolPolicy::IncludeAll, DrawGranularity::PerBatch, &mut rng);
    assert!(matches!(r, Err(Error::Sequencing(_))));
    assert!(matches!(train_step_joint(&mut model, &sgd(), None, &t), Err(Error::Sequencing(_))));
}

#[test]
fn shallow_step_rejects_deepest_or_out_of_range_expert() {
    let mut model = micro(3, 1);
    let (x, t) = random_batch(2, 2);
    for n in [2, 3, 9] {
        assert!(matches!(
            train_step_shallow(&mut model, &sgd(), n, &x, &t),
            Err(Error::Config(_))
        ));
    }
}

#[test]
fn shallow_step_leaves_other_components_untouched() {
    let mut model = micro(3, 12);
    let (x, t) = random_batch(4, 13);
    let snapshot = |m: &mut fairsight::model::ExpertModel| {
        let heads: Vec<Vec<f64>> = (0..3).map(|e| values_of(|f| m.heads[e].visit_params(f))).collect();
        let overall = values_of(|f| m.overall.visit_params(f));
        let prefix1 = values_of(|f| m.backbone.visit_prefix_params(1, f));
        let full = values_of(|f| m.backbone.visit_params(f));
        (heads, overall, prefix1, full)
    };
    let before = snapshot(&mut model);
    train_step_shallow(&mut model, &sgd(), 1, &x, &t).unwrap();
    let after = snapshot(&mut model);
    assert_eq!(before.0[0], after.0[0]);
    assert_eq!(before.0[2], after.0[2]);
    assert_ne!(before.0[1], after.0[1]);
    assert_eq!(before.1, after.1);
    assert_ne!(before.2, after.2);
    // the third stage lies beyond expert 1's span
    let k = before.2.len();
    assert_eq!(before.3[k..], after.3[k..]);
}

#[test]
fn joint_loss_is_the_sum_of_its_terms() {
    let mut model = micro(3, 21);
    let (x, t) = random_batch(4, 22);
    let pass = model.forward(&x, &ForwardSpec::train_all(3)).unwrap();
    let mut oracle = 0.0;
    for e in 0..3 {
        oracle += cross_entropy(&pass.head(e).unwrap().scores.logits, &t).0;
    }
    oracle += cross_entropy(&pass.overall.as_ref().unwrap().scores.logits, &t).0;
    let r = step_gradients(&mut model, StepKind::Joint, &x, &t).unwrap();
    assert_eq!(r.terms.len(), 4);
    assert!((r.loss - r.terms.iter().sum::<f64>()).abs() < 1e-6);
    assert!((r.loss - oracle).abs() < 1e-6);
}

#[test]
fn concat_step_uses_concatenated_descriptors() {
    let model = micro(3, 30);
    let (x, _) = random_batch(3, 31);
    let pass = model.forward(&x, &ForwardSpec::train_all(3)).unwrap();
    let parts: Vec<_> = (0..3).map(|e| &pass.head(e).unwrap().compressed.descriptor).collect();
    let cat = concat_overall(&parts, 3).unwrap();
    assert_eq!(cat.values, pass.overall.as_ref().unwrap().descriptor.values);
}

#[test]
fn losses_are_finite_and_non_negative() {
    let mut model = micro(3, 40);
    let (x, t) = random_batch(4, 41);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = train_iteration(&mut model, &sgd(), &x, &t, &TrainConfig::default(), 0, &mut rng).unwrap();
    assert!(out.losses.iter().all(|l| l.is_finite() && *l >= 0.0));
}

#[test]
fn out_of_vocabulary_target_is_a_validation_error() {
    let mut model = micro(1, 1);
    let (x, _) = random_batch(2, 2);
    assert!(matches!(
        step_gradients(&mut model, StepKind::Concat, &x, &[0, 5]),
        Err(Error::Validation(_))
    ));
}

#[test]
fn region_geometry_is_independent_of_the_loss() {
    // Regions come from the forward pass only; changing the targets (and so
    // the loss and its gradients) must leave the boxes where they were.
    let model = micro(3, 50);
    let (x, t) = random_batch(4, 51);
    let flipped: Vec<usize> = t.iter().map(|v| 1 - v).collect();
    let a = step_gradients(&mut model.clone(), StepKind::Deepest, &x, &t).unwrap();
    let b = step_gradients(&mut model.clone(), StepKind::Deepest, &x, &flipped).unwrap();
    assert_ne!(a.loss, b.loss);
    let boxes = |r: &StepResult| {
        r.regions.as_ref().unwrap().experts.iter().flatten().map(|x| x.bbox).collect::<Vec<_>>()
    };
    assert_eq!(boxes(&a), boxes(&b));
}

#[test]
fn final_epoch_rate_does_not_exceed_the_first() {
    assert!(cosine_lr(0.002, 9, 10) <= cosine_lr(0.002, 0, 10));
}

#[test]
fn params_without_gradient_are_skipped_by_sgd() {
    let mut model = micro(2, 60);
    let before = common::all_values(&mut model);
    model.clear_grads();
    sgd().step(&mut model);
    assert_eq!(before, common::all_values(&mut model));
}
