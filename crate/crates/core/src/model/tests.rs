use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::{check_with, DEFAULT_STEP};
use crate::autodiff::{Graph, Reduction, Var};
use crate::error::FpanError;
use crate::nn::{Bindings, ConvLayer, Init, ParameterStore};
use crate::tensor::{Shape, Tensor4};

fn rand_tensor(shape: Shape, seed: u64) -> Tensor4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Overwrite every parameter (zero-initialized ones included) with U(-scale, scale).
fn randomize(store: &mut ParameterStore<f64>, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in store.iter_mut() {
        for v in p.tensor.data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

fn conv(g: &mut Graph<f64>, b: &Bindings, l: &ConvLayer, x: Var) -> Var {
    g.conv2d(x, b.var(l.weight), Some(b.var(l.bias)), l.stride, l.pad).unwrap()
}

fn assert_close(a: &Tensor4<f64>, b: &Tensor4<f64>, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let d = a.max_abs_diff(b);
    assert!(d <= tol, "max abs diff {d} > {tol}");
}

fn p4() -> Ablation {
    AblationPreset::P4.ablation()
}

#[test]
fn feedback_preserves_shape_and_zero_weights_give_zero() {
    let mut store = ParameterStore::<f64>::new();
    let fb = FeedbackStructure::new(&mut store, "fb", 8, 2, p4(), Init::HeUniform, 1).unwrap();
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let x = g.constant(rand_tensor([1, 8, 8, 8], 2));
    let y = fb.forward(&mut g, &b, x).unwrap();
    assert_eq!(g.shape(y), [1, 8, 8, 8]);

    let mut zstore = ParameterStore::<f64>::new();
    let fb = FeedbackStructure::new(&mut zstore, "fb", 8, 2, p4(), Init::Zero, 1).unwrap();
    let mut g = Graph::new();
    let b = zstore.bind(&mut g, false);
    let x = g.constant(rand_tensor([1, 8, 8, 8], 2));
    let y = fb.forward(&mut g, &b, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(rand_tensor([1, 4, 8, 8], 2));
    assert!(matches!(fb.forward(&mut g, &b, x), Err(FpanError::Dimension(_))));
}

#[test]
fn feedback_depth_one_matches_manual_chain() {
    let mut store = ParameterStore::<f64>::new();
    let fb = FeedbackStructure::new(&mut store, "fb", 4, 1, p4(), Init::HeUniform, 3).unwrap();
    randomize(&mut store, 4, 0.3);
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let f = g.constant(rand_tensor([2, 4, 5, 6], 5));
    let y = fb.forward(&mut g, &b, f).unwrap();

    let x0 = conv(&mut g, &b, &fb.initial, f);
    let x0 = g.relu(x0);
    let c1 = g.concat_channels(&[x0, f]).unwrap();
    let x11 = conv(&mut g, &b, &fb.stage1[0], c1);
    let x11 = g.relu(x11);
    let c2 = g.concat_channels(&[x11, x11]).unwrap();
    let x21 = conv(&mut g, &b, &fb.stage2[0], c2);
    let x21 = g.relu(x21);
    assert_eq!(g.value(y).data(), g.value(x21).data());
}

#[test]
fn feedback_ablations_change_wiring() {
    let mut store = ParameterStore::<f64>::new();
    let p0 = AblationPreset::P0.ablation();
    let fb = FeedbackStructure::new(&mut store, "fb", 4, 2, p0, Init::HeUniform, 3).unwrap();
    assert!(fb.stage2.is_empty());
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let f = g.constant(rand_tensor([1, 4, 5, 5], 5));
    let y = fb.forward(&mut g, &b, f).unwrap();

    let mut last = conv(&mut g, &b, &fb.initial, f);
    last = g.relu(last);
    for l in &fb.stage1 {
        let c = g.concat_channels(&[last, last]).unwrap();
        let x = conv(&mut g, &b, l, c);
        last = g.relu(x);
    }
    assert_eq!(g.value(y).data(), g.value(last).data());
}

fn key_layer(store: &mut ParameterStore<f64>, c: usize, w: &[f64], bias: f64) -> ConvLayer {
    let l = ConvLayer::same(store, "key", c, 1, 1, Init::Zero, 0).unwrap();
    store.get_mut(l.weight).tensor.data_mut().copy_from_slice(w);
    store.get_mut(l.bias).tensor.data_mut()[0] = bias;
    l
}

#[test]
fn context_pool_of_constant_map_is_constant() {
    let mut store = ParameterStore::<f64>::new();
    let key = ConvLayer::same(&mut store, "key", 3, 1, 1, Init::HeUniform, 9).unwrap();
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let x = g.constant(Tensor4::from_fn([2, 3, 4, 5], |[_, c, _, _]| c as f64 - 0.5));
    let (pooled, alpha) = gc_context_pool(&mut g, &b, x, &key).unwrap();
    assert_eq!(g.shape(pooled), [2, 3, 1, 1]);
    for n in 0..2 {
        for c in 0..3 {
            assert!((g.value(pooled).at([n, c, 0, 0]) - (c as f64 - 0.5)).abs() < 1e-12);
        }
        let s: f64 = g.value(alpha).data()[n * 20..(n + 1) * 20].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn context_pool_hand_computed_four_positions() {
    // Channel 0 = [0, 1, 2, 3], channel 1 = [1, 1, -1, 2]; key uses channel 0 only.
    let x_t = Tensor4::from_vec([1, 2, 2, 2], vec![0.0, 1.0, 2.0, 3.0, 1.0, 1.0, -1.0, 2.0]).unwrap();
    let mut store = ParameterStore::<f64>::new();
    let key = key_layer(&mut store, 2, &[1.0, 0.0], 0.5);
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let x = g.constant(x_t);
    let (pooled, alpha) = gc_context_pool(&mut g, &b, x, &key).unwrap();
    let e: Vec<f64> = (0..4).map(|j| (j as f64).exp()).collect();
    let z: f64 = e.iter().sum();
    let a: Vec<f64> = e.iter().map(|v| v / z).collect();
    let want0 = a[1] + 2.0 * a[2] + 3.0 * a[3];
    let want1 = a[0] + a[1] - a[2] + 2.0 * a[3];
    for j in 0..4 {
        assert!((g.value(alpha).data()[j] - a[j]).abs() < 1e-12);
    }
    assert!((g.value(pooled).data()[0] - want0).abs() < 1e-12);
    assert!((g.value(pooled).data()[1] - want1).abs() < 1e-12);
}

#[test]
fn pyramid_block_is_identity_at_init() {
    let mut store = ParameterStore::<f64>::new();
    let pnlb = PyramidNonLocal::new(&mut store, "a", 64, &[1, 2, 4], 16, Init::HeUniform, 7).unwrap();
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let x_t = rand_tensor([1, 64, 24, 24], 8);
    let x = g.constant(x_t.clone());
    let pooled = pnlb.pooled(&mut g, &b, x).unwrap();
    let sizes: Vec<Shape> = pooled.iter().map(|&(_, a)| g.shape(a)).collect();
    assert_eq!(sizes, vec![[1, 1, 24, 24], [1, 1, 12, 12], [1, 1, 6, 6]]);
    let y = pnlb.forward(&mut g, &b, x).unwrap();
    assert_eq!(g.value(y).data(), x_t.data());
}

#[test]
fn pyramid_block_rejects_tiny_inputs() {
    let mut store = ParameterStore::<f64>::new();
    let pnlb = PyramidNonLocal::new(&mut store, "a", 4, &[1, 2, 4], 4, Init::HeUniform, 7).unwrap();
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let x = g.constant(rand_tensor([1, 4, 1, 1], 8));
    assert!(matches!(pnlb.forward(&mut g, &b, x), Err(FpanError::Config(_))));
    // 3x3 reaches 1x1 after one downsampling, too small for a second one.
    let x = g.constant(rand_tensor([1, 4, 3, 3], 8));
    assert!(matches!(pnlb.forward(&mut g, &b, x), Err(FpanError::Config(_))));
    let x = g.constant(rand_tensor([1, 4, 4, 4], 8));
    assert!(pnlb.forward(&mut g, &b, x).is_ok());
}

#[test]
fn single_scale_block_matches_hand_built_gc_block() {
    let mut store = ParameterStore::<f64>::new();
    let gc = PyramidNonLocal::new(&mut store, "gc", 8, &[1], 4, Init::HeUniform, 11).unwrap();
    randomize(&mut store, 12, 0.5);
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let x = g.constant(rand_tensor([2, 8, 5, 4], 13));
    let y = gc.forward(&mut g, &b, x).unwrap();

    let (ctx, _) = gc_context_pool(&mut g, &b, x, &gc.levels[0].key).unwrap();
    let t = &gc.transform;
    let v = conv(&mut g, &b, &t.squeeze, ctx);
    let v = g.layer_norm(v, b.var(t.gamma), b.var(t.beta), 1e-5).unwrap();
    let v = g.relu(v);
    let delta = conv(&mut g, &b, &t.expand, v);
    let want = g.broadcast_add(x, delta).unwrap();
    assert_eq!(g.value(y).data(), g.value(want).data());
    assert!(g.value(y).max_abs_diff(g.value(x)) > 1e-3);
}

#[test]
fn pyramid_parameter_layout() {
    let mut store = ParameterStore::<f32>::new();
    let p = PyramidNonLocal::new(&mut store, "a", 64, &[1, 2, 4], 16, Init::HeUniform, 0).unwrap();
    let counts: Vec<usize> = p.levels.iter().map(|l| l.downsamplers.len()).collect();
    assert_eq!(counts, vec![0, 1, 2]);
    // 3 downsamplers, 3 keys, squeeze 192->4, norm 2x4, expand 4->64
    let want = 3 * (64 * 64 * 36 + 64) + 3 * 65 + (192 * 4 + 4) + 8 + (4 * 64 + 64);
    assert_eq!(store.total_elements(), want);
    assert_eq!(want, 443_855);
    let v2 = store.by_name("a.expand.weight").unwrap();
    assert!(v2.tensor.data().iter().all(|&v| v == 0.0));
}

#[test]
fn non_local_identity_at_init_and_rows_normalized() {
    let mut store = ParameterStore::<f64>::new();
    let nl = NonLocalBlock::new(&mut store, "nl", 6, 3, 21).unwrap();
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let x_t = rand_tensor([2, 6, 4, 5], 22);
    let x = g.constant(x_t.clone());
    let (y, sim) = nl.forward(&mut g, &b, x).unwrap();
    assert_eq!(g.value(y).data(), x_t.data());
    assert_eq!(g.shape(sim), [2, 1, 20, 20]);
    for row in g.value(sim).data().chunks(20) {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn non_local_hand_computed_similarity() {
    let mut store = ParameterStore::<f64>::new();
    let nl = NonLocalBlock::new(&mut store, "nl", 2, 2, 0).unwrap();
    for l in [&nl.query, &nl.key, &nl.value, &nl.project] {
        let w = store.get_mut(l.weight).tensor.data_mut();
        w.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    }
    let vals = [0.0, 1.0, 2.0, -1.0, 1.0, 0.5, -1.0, 0.0];
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let x = g.constant(Tensor4::from_vec([1, 2, 2, 2], vals.to_vec()).unwrap());
    let (y, sim) = nl.forward(&mut g, &b, x).unwrap();
    let pos: Vec<[f64; 2]> = (0..4).map(|j| [vals[j], vals[4 + j]]).collect();
    for i in 0..4 {
        let logits: Vec<f64> = (0..4)
            .map(|j| pos[i][0] * pos[j][0] + pos[i][1] * pos[j][1])
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let s: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        for j in 0..4 {
            assert!((g.value(sim).data()[i * 4 + j] - s[j]).abs() < 1e-12);
        }
        for c in 0..2 {
            let agg: f64 = (0..4).map(|j| s[j] * pos[j][c]).sum();
            let want = agg + pos[i][c];
            assert!((g.value(y).data()[c * 4 + i] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn non_local_rejects_large_maps() {
    let mut store = ParameterStore::<f32>::new();
    let nl = NonLocalBlock::new(&mut store, "nl", 2, 1, 0).unwrap();
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let x = g.constant(Tensor4::zeros([1, 2, 65, 64]));
    assert!(matches!(nl.forward(&mut g, &b, x), Err(FpanError::Usage(_))));
}

#[test]
fn fpab_identity_at_init_and_zero_weights_pass_through() {
    let cfg = ModelConfig::tiny(2);
    let mut store = ParameterStore::<f64>::new();
    let block = Fpab::new(&mut store, "b", &cfg, Init::HeUniform, 31).unwrap();
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let f = g.constant(rand_tensor([1, 8, 8, 8], 32));
    let y = block.forward(&mut g, &b, f).unwrap();
    let fb = block.feedback.forward(&mut g, &b, f).unwrap();
    let want = g.add(f, fb).unwrap();
    assert_eq!(g.value(y).data(), g.value(want).data());

    let mut zstore = ParameterStore::<f64>::new();
    let block = Fpab::new(&mut zstore, "b", &cfg, Init::Zero, 31).unwrap();
    let mut g = Graph::new();
    let b = zstore.bind(&mut g, false);
    let f_t = rand_tensor([1, 8, 8, 8], 33);
    let f = g.constant(f_t.clone());
    let y = block.forward(&mut g, &b, f).unwrap();
    assert_eq!(g.value(y).data(), f_t.data());
}

#[test]
fn fpab_matches_manual_composition() {
    let cfg = ModelConfig::tiny(2);
    let mut store = ParameterStore::<f64>::new();
    let block = Fpab::new(&mut store, "b", &cfg, Init::HeUniform, 41).unwrap();
    randomize(&mut store, 42, 0.2);
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let f = g.constant(rand_tensor([1, 8, 8, 8], 43));
    let y = block.forward(&mut g, &b, f).unwrap();
    let fb = block.feedback.forward(&mut g, &b, f).unwrap();
    let at = block.attention.as_ref().unwrap().forward(&mut g, &b, fb).unwrap();
    let want = g.add(f, at).unwrap();
    assert_eq!(g.value(y).data(), g.value(want).data());
}

#[test]
fn tiny_network_matches_manual_composition() {
    let cfg = ModelConfig {
        stage_depth: 1,
        ..ModelConfig::tiny(2)
    };
    let mut model = Fpan::<f64>::new(cfg, 51).unwrap();
    randomize(&mut model.store, 52, 0.2);
    let mut g = Graph::new();
    let b = model.store.bind(&mut g, false);
    let lr = g.constant(rand_tensor([1, 3, 6, 7], 53));
    let y = model.forward(&mut g, &b, lr).unwrap();
    assert_eq!(g.shape(y), [1, 3, 12, 14]);

    let f0 = conv(&mut g, &b, &model.head, lr);
    let f1 = model.blocks[0].forward(&mut g, &b, f0).unwrap();
    let h = conv(&mut g, &b, &model.fusion_merge, f1);
    let h = conv(&mut g, &b, &model.fusion_conv, h);
    let fgf = g.add(f0, h).unwrap();
    let (up, r) = &model.upsample[0];
    assert_eq!(*r, 2);
    let u = conv(&mut g, &b, up, fgf);
    let u = g.pixel_shuffle(u, 2).unwrap();
    let out = conv(&mut g, &b, &model.tail, u);
    assert_eq!(g.value(y).data(), g.value(out).data());
}

#[test]
fn fusion_concat_order_is_last_block_first() {
    let cfg = ModelConfig {
        num_blocks: 3,
        ..ModelConfig::tiny(3)
    };
    let mut model = Fpan::<f64>::new(cfg, 61).unwrap();
    randomize(&mut model.store, 62, 0.2);
    let mut g = Graph::new();
    let b = model.store.bind(&mut g, false);
    let lr = g.constant(rand_tensor([1, 3, 8, 8], 63));
    let feats = model.forward_features(&mut g, &b, lr).unwrap();

    // Permute the concatenation to [F_1, F_2, F_3] and the fusion weight's
    // input-channel groups the same way.
    let c = 8;
    let w = model.store.get(model.fusion_merge.weight).tensor.clone();
    let groups = 3;
    let perm_w = Tensor4::from_fn([c, groups * c, 1, 1], |[o, i, _, _]| {
        let (grp, k) = (i / c, i % c);
        w.at([o, (groups - 1 - grp) * c + k, 0, 0])
    });
    let pw = g.constant(perm_w);
    let cat = g.concat_channels(&feats.blocks).unwrap();
    let h = g
        .conv2d(cat, pw, Some(b.var(model.fusion_merge.bias)), 1, 0)
        .unwrap();
    let h = conv(&mut g, &b, &model.fusion_conv, h);
    let fused = g.add(feats.shallow, h).unwrap();
    assert_close(g.value(fused), g.value(feats.fused), 1e-12);

    // The unpermuted weights on the permuted concat give a different result.
    let h = conv(&mut g, &b, &model.fusion_merge, cat);
    let h = conv(&mut g, &b, &model.fusion_conv, h);
    let wrong = g.add(feats.shallow, h).unwrap();
    assert!(g.value(wrong).max_abs_diff(g.value(feats.fused)) > 1e-6);
}

#[test]
fn reconstruction_layout_per_scale() {
    for (s, factors) in [(2, vec![2]), (3, vec![3]), (4, vec![2, 2])] {
        let m = Fpan::<f32>::skeleton(ModelConfig::tiny(s)).unwrap();
        assert_eq!(m.upsample.iter().map(|(_, r)| *r).collect::<Vec<_>>(), factors);
    }
}

#[test]
fn unsupported_scale_is_config_error() {
    assert!(matches!(
        Fpan::<f32>::new(ModelConfig::tiny(5), 0),
        Err(FpanError::Config(_))
    ));
}

#[test]
fn param_count_matches_conv_layers() {
    for preset in AblationPreset::ALL {
        let m = Fpan::<f32>::skeleton(ModelConfig::default().with_ablation(preset)).unwrap();
        let conv: usize = m.conv_layers().iter().map(|l| l.param_count()).sum();
        let ln = if m.config.ablation.attention == AttentionKind::None {
            0
        } else {
            2 * m.config.bottleneck() * m.config.num_blocks
        };
        assert_eq!(conv + ln, m.param_count(), "{preset}");
    }
}

#[test]
fn ablation_parameter_counts_are_monotone() {
    let counts: Vec<usize> = AblationPreset::ALL
        .iter()
        .map(|&p| count_params_for(&ModelConfig::default().with_ablation(p)).unwrap())
        .collect();
    assert!(counts[0] == counts[1]);
    assert!(counts[1] < counts[2]);
    assert!(counts[2] < counts[3]);
    assert!(counts[3] < counts[4]);
}

#[test]
fn full_preset_lands_near_target() {
    let cfg = ModelConfig::full(2).unwrap();
    let n = count_params_for(&cfg).unwrap();
    assert!(n >= FULL_SIZE_TARGET);
    let smaller = ModelConfig {
        num_blocks: cfg.num_blocks - 1,
        ..cfg.clone()
    };
    assert!(count_params_for(&smaller).unwrap() < FULL_SIZE_TARGET);
    assert_eq!(cfg.num_blocks, 11);
    assert_eq!(n, 12_015_592);
}

#[test]
fn shared_layers_get_identical_weights_across_ablations() {
    let a = Fpan::<f32>::new(ModelConfig::tiny(2), 5).unwrap();
    let b = Fpan::<f32>::new(ModelConfig::tiny(2).with_ablation(AblationPreset::P2), 5).unwrap();
    for (name, p) in b.store.iter() {
        assert_eq!(a.store.by_name(name).unwrap().tensor.data(), p.tensor.data(), "{name}");
    }
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let cfg = ModelConfig::tiny(2);
    let mut model = Fpan::<f64>::new(cfg, 71).unwrap();
    randomize(&mut model.store, 72, 0.3);
    let lr = rand_tensor([1, 3, 8, 8], 73).map(|v| 0.5 + 0.5 * v);
    let hr = rand_tensor([1, 3, 16, 16], 74).map(|v| 0.5 + 0.5 * v);

    let loss_of = |m: &Fpan<f64>, g: &mut Graph<f64>, b: &Bindings| -> crate::Result<Var> {
        let x = g.constant(lr.clone());
        let t = g.constant(hr.clone());
        let y = m.forward(g, b, x)?;
        g.l1_loss(y, t, Reduction::Sum)
    };

    let mut g = Graph::new();
    let b = model.store.bind(&mut g, true);
    let loss = loss_of(&model, &mut g, &b).unwrap();
    g.backward(loss).unwrap();
    model.store.accumulate_grads(&g, &b);

    let mut tensors: Vec<Tensor4<f64>> = model.store.iter().map(|(_, p)| p.tensor.clone()).collect();
    let analytic: Vec<Vec<f64>> = model
        .store
        .iter()
        .map(|(_, p)| p.tensor.grad.clone().unwrap())
        .collect();
    let mut probe = model.clone();
    let report = check_with(
        &mut tensors,
        &analytic,
        |ts| {
            for ((_, p), t) in probe.store.iter_mut().zip(ts) {
                p.tensor.data_mut().copy_from_slice(t.data());
            }
            let mut g = Graph::new();
            let b = probe.store.bind(&mut g, false);
            let l = loss_of(&probe, &mut g, &b)?;
            Ok(g.value(l).data()[0])
        },
        DEFAULT_STEP,
    )
    .unwrap();
    assert_eq!(report.checked, model.param_count());
    assert!(report.passes(1e-4), "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn output_is_scale_times_input(s in 2usize..=4, h in 4usize..12, w in 4usize..12, n in 1usize..3) {
        let model = Fpan::<f32>::new(ModelConfig::tiny(s), 3).unwrap();
        let lr = Tensor4::<f32>::full([n, 3, h, w], 0.5);
        let out = model.super_resolve(&lr).unwrap();
        prop_assert_eq!(out.shape(), [n, 3, s * h, s * w]);
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn every_block_preserves_shape(h in 4usize..10, w in 4usize..10) {
        let cfg = ModelConfig::tiny(2);
        let mut store = ParameterStore::<f32>::new();
        let block = Fpab::new(&mut store, "b", &cfg, Init::HeUniform, 1).unwrap();
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        let x = g.constant(Tensor4::full([1, 8, h, w], 0.25));
        let y = block.forward(&mut g, &b, x).unwrap();
        prop_assert_eq!(g.shape(y), [1, 8, h, w]);
    }
}
