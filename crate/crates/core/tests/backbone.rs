mod common;

use fairsight::backbone::*;
use fairsight::experts::{global_pool, ExpertHead, Pooling};
use fairsight::nn::{conv_output_size, Layer, LayerSpec, Mode, Parameterized};
use ndarray::{Array1, Array2, Array4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn halving_cnn_has_one_stage_per_block() {
    let desc = toy5_descriptor(96, [4, 4, 4, 4, 4]);
    let stages = partition_stages(&desc).unwrap();
    // sizes from the conv and pooling formulas directly
    let mut size = conv_output_size(96, 3, 2, 1);
    let mut expected = vec![(size, size)];
    for _ in 0..4 {
        size = conv_output_size(conv_output_size(size, 2, 2, 0), 3, 1, 1);
        expected.push((size, size));
    }
    assert_eq!(stages.spatial_sizes(), expected);
    assert_eq!(expected, vec![(48, 48), (24, 24), (12, 12), (6, 6), (3, 3)]);
    assert_eq!(stages.boundaries(), vec![2, 6, 10, 14, 18]);
}

#[test]
fn resnet50_experts_end_at_the_last_three_stages() {
    let stages = partition_stages(&resnet50_descriptor(448)).unwrap();
    assert_eq!(stages.stage_count(), 5);
    assert_eq!(stages.spatial_sizes()[2], (56, 56));
    let spans = expert_spans(&[2, 3, 4], 5).unwrap();
    assert_eq!(spans.iter().map(|s| s.terminal_stage).collect::<Vec<_>>(), vec![2, 3, 4]);
}

fn randomised_micro(seed: u64) -> Backbone {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bb = Backbone::new(micro_descriptor(), &mut rng).unwrap();
    for layer in &mut bb.layers {
        match layer {
            Layer::Conv(c) => c.bias.value.mapv_inplace(|_| rng.gen_range(-0.5..0.5)),
            Layer::BatchNorm(n) => {
                n.gamma.value.mapv_inplace(|_| rng.gen_range(0.5..1.5));
                n.beta.value.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
                n.running_mean.mapv_inplace(|_| rng.gen_range(-0.5..0.5));
                n.running_var.mapv_inplace(|_| rng.gen_range(0.5..2.0));
            }
            _ => {}
        }
    }
    bb
}

/// Layer-by-layer forward with explicit loops, eval statistics.
fn manual_forward(bb: &Backbone, x: &Array4<f64>) -> Vec<Array4<f64>> {
    let mut cur = x.clone();
    let mut outs = Vec::new();
    for stage in &bb.stages.stages {
        for layer in &bb.layers[stage.layers.clone()] {
            cur = match layer {
                Layer::Conv(c) => {
                    let (b, ci, h, w) = cur.dim();
                    let k = c.kernel;
                    let ho = (h + 2 * c.padding - k) / c.stride + 1;
                    let wo = (w + 2 * c.padding - k) / c.stride + 1;
                    Array4::from_shape_fn((b, c.out_channels, ho, wo), |(n, o, y, xx)| {
                        let mut acc = c.bias.value[o];
                        for ch in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * c.stride + ky) as isize - c.padding as isize;
                                    let ix = (xx * c.stride + kx) as isize - c.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += c.weight.value[[o, (ch * k + ky) * k + kx]]
                                            * cur[[n, ch, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        acc
                    })
                }
                Layer::BatchNorm(bn) => Array4::from_shape_fn(cur.dim(), |(n, ch, y, xx)| {
                    let v = cur[[n, ch, y, xx]];
                    bn.gamma.value[ch] * (v - bn.running_mean[ch]) / (bn.running_var[ch] + bn.eps).sqrt()
                        + bn.beta.value[ch]
                }),
                Layer::Relu => cur.mapv(|v| v.max(0.0)),
                Layer::MaxPool(p) => {
                    let (b, ch, h, w) = cur.dim();
                    Array4::from_shape_fn((b, ch, h / p.stride, w / p.stride), |(n, c, y, xx)| {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..p.kernel {
                            for dx in 0..p.kernel {
                                m = m.max(cur[[n, c, y * p.stride + dy, xx * p.stride + dx]]);
                            }
                        }
                        m
                    })
                }
                other => panic!("unexpected layer {other:?}"),
            };
        }
        outs.push(cur.clone());
    }
    outs
}

#[test]
fn forward_matches_a_manual_oracle() {
    let bb = randomised_micro(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.gen_range(-1.0..1.0));
    let trace = bb.forward(&x, 2, Mode::Eval).unwrap();
    for (got, want) in trace.stage_outputs.iter().zip(manual_forward(&bb, &x)) {
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1.0));
        }
    }
}

#[test]
fn forward_collect_is_repeatable_and_shares_the_prefix() {
    let bb = randomised_micro(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Array4::from_shape_fn((3, 3, 8, 8), |_| rng.gen_range(-1.0..1.0));
    let spans = expert_spans(&[0, 1, 2], 3).unwrap();
    let a = bb.forward_collect(&x, &spans, Mode::Eval).unwrap();
    let b = bb.forward_collect(&x, &spans, Mode::Eval).unwrap();
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.data, q.data);
    }
    // deepest expert sees exactly what the whole backbone produces
    let full = bb.forward(&x, 2, Mode::Eval).unwrap();
    assert_eq!(a[2].data, full.stage_outputs[2]);
}

#[test]
fn deeper_weights_do_not_affect_shallow_maps() {
    let bb = randomised_micro(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = Array4::from_shape_fn((2, 3, 8, 8), |_| rng.gen_range(-1.0..1.0));
    let spans = expert_spans(&[0, 2], 3).unwrap();
    let before = bb.forward_collect(&x, &spans, Mode::Eval).unwrap();

    let mut perturbed = bb.clone();
    let mut prefix = 0;
    perturbed.visit_prefix_params(0, &mut |p| prefix += p.len());
    let mut seen = 0;
    perturbed.visit_params(&mut |p| {
        if seen >= prefix {
            for v in p.values_mut() {
                *v += 0.3;
            }
        }
        seen += p.len();
    });
    let after = perturbed.forward_collect(&x, &spans, Mode::Eval).unwrap();
    assert_eq!(before[0].data, after[0].data);
    assert_ne!(before[1].data, after[1].data);
}

fn head_fixture(seed: u64) -> (ExpertHead, FeatureMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = ExpertHead::new(5, 6, 3, Pooling::Max, &mut rng).unwrap();
    let data = Array4::from_shape_fn((2, 5, 4, 4), |_| rng.gen_range(-1.0..1.0));
    (head, FeatureMap { data, expert: 0 })
}

#[test]
fn max_descriptor_is_the_spatial_maximum() {
    let (head, x) = head_fixture(3);
    let c = head.compress(&x, Mode::Eval).unwrap();
    let act = &c.activation.data;
    let (b, ch, h, w) = act.dim();
    for n in 0..b {
        for k in 0..ch {
            let mut m = f64::NEG_INFINITY;
            for i in 0..h {
                for j in 0..w {
                    m = m.max(act[[n, k, i, j]]);
                }
            }
            assert_eq!(c.descriptor.values[[n, k]], m);
        }
    }
}

#[test]
fn classifier_matches_a_dot_product() {
    let (head, x) = head_fixture(4);
    let c = head.compress(&x, Mode::Eval).unwrap();
    let scores = head.classify(&c.descriptor).unwrap();
    let w = &head.classifier.weight.value;
    let bias = &head.classifier.bias.value;
    for n in 0..2 {
        for k in 0..3 {
            let mut s = bias[k];
            for d in 0..6 {
                s += w[[k, d]] * c.descriptor.values[[n, d]];
            }
            assert!((scores.logits[[n, k]] - s).abs() <= 1e-6 * s.abs().max(1.0));
        }
    }
}

proptest! {
    #[test]
    fn global_max_pool_ignores_spatial_order(v in prop::collection::vec(-5.0f64..5.0, 2 * 3 * 9), seed in any::<u64>()) {
        let x = Array4::from_shape_vec((2, 3, 3, 3), v).unwrap();
        let mut perm: Vec<usize> = (0..9).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..9).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let shuffled = Array4::from_shape_fn((2, 3, 3, 3), |(n, c, i, j)| {
            let p = perm[i * 3 + j];
            x[[n, c, p / 3, p % 3]]
        });
        prop_assert_eq!(global_pool(&x, Pooling::Max), global_pool(&shuffled, Pooling::Max));
    }

    #[test]
    fn positive_scaling_keeps_the_predicted_class(
        d in prop::collection::vec(-3.0f64..3.0, 6),
        scale in 0.01f64..100.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = ExpertHead::new(2, 6, 4, Pooling::Max, &mut rng).unwrap();
        head.classifier.bias.value = Array1::zeros(4);
        let v = fairsight::experts::Descriptor { values: Array2::from_shape_vec((1, 6), d).unwrap() };
        let scaled = fairsight::experts::Descriptor { values: &v.values * scale };
        let a = head.classify(&v).unwrap().predicted();
        let b = head.classify(&scaled).unwrap().predicted();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn unsupported_layer_mix_is_rejected() {
    let desc = BackboneDescriptor {
        name: "dense-only".into(),
        input: (3, 8, 8),
        layers: vec![LayerSpec::Relu],
        stage_ends: None,
    };
    assert!(matches!(partition_stages(&desc), Err(fairsight::Error::UnsupportedBackbone(_))));
}
