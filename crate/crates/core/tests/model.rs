mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::{normal, rng, small_config, tiny_config};
use mctseg::gradcheck::ModelCheck;
use mctseg::losses::{branch_losses, LabelVolume};
use mctseg::model::checkpoint::Checkpoint;
use mctseg::model::{
    cmf_forward, decode, encode, mfd_loss, model_forward, param_shapes, Branch, EncoderFeatures, Graph, Mode,
    ModelConfig, ParamStore,
};
use mctseg::{Error, ModalityId, ModalityMask};
use mctseg_tensor::{relative_error, Scalar, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn volume<T: Scalar>(crop: usize, seed: u64) -> Tensor<T> {
    normal(&[1, crop, crop, crop], &mut rng(seed))
}

fn inputs<T: Scalar>(crop: usize, seed: u64) -> [Option<Tensor<T>>; 4] {
    std::array::from_fn(|i| Some(volume(crop, seed * 10 + i as u64)))
}

fn present_only<T: Scalar>(all: &[Option<Tensor<T>>; 4], mask: ModalityMask) -> [Option<Tensor<T>>; 4] {
    std::array::from_fn(|i| all[i].clone().filter(|_| mask.delta()[i]))
}

#[test]
fn encoder_halves_space_and_follows_widths() {
    let cfg = ModelConfig::default();
    let params = ParamStore::<f32>::init(&cfg, 0);
    let mut g = Graph::new(&params, false);
    let x = g.tape.constant(volume(32, 1));
    let f = encode(&mut g, x, Branch::Unimodal(ModalityId::Flair)).unwrap();
    for l in 1..=5 {
        let s = 32 >> (l - 1);
        assert_eq!(g.tape.shape(f.layer(l)), &[cfg.widths[l - 1], s, s, s]);
    }
    assert_eq!(g.tape.shape(f.bottleneck()), &[128, 2, 2, 2]);

    let four = g.tape.concat(&[x, x, x, x], 0).unwrap();
    let t = encode(&mut g, four, Branch::Multimodal).unwrap();
    for l in 1..=5 {
        assert_eq!(g.tape.shape(t.layer(l)), g.tape.shape(f.layer(l)));
    }
}

#[test]
fn encoder_rejects_non_divisible_input() {
    let cfg = ModelConfig::default();
    let params = ParamStore::<f32>::init(&cfg, 0);
    let mut g = Graph::new(&params, false);
    let x = g.tape.constant(volume(30, 1));
    assert!(matches!(
        encode(&mut g, x, Branch::Unimodal(ModalityId::T1)),
        Err(Error::Shape(_))
    ));
}

fn constant_features(tape: &mut Tape<f64>, widths: [usize; 5], crop: usize, value: f64) -> EncoderFeatures {
    let vars: Vec<_> = (0..5)
        .map(|l| {
            let s = crop >> l;
            tape.constant(Tensor::full(&[widths[l], s, s, s], value))
        })
        .collect();
    EncoderFeatures(vars.try_into().unwrap())
}

#[test]
fn mfd_loss_counts_mid_layer_elements() {
    let w = ModelConfig::default().widths;
    let mut tape = Tape::<f64>::new();
    let teacher = constant_features(&mut tape, w, 32, 1.0);
    let ones = || Some(teacher);
    let zero = constant_features(&mut tape, w, 32, 0.0);

    let equal = mfd_loss(
        &mut tape,
        &teacher,
        &[ones(), ones(), ones(), ones()],
        ModalityMask::FULL,
    )
    .unwrap();
    assert_eq!(tape.value(equal).item(), 0.0);

    let one_off = [Some(zero), ones(), ones(), ones()];
    let l = mfd_loss(&mut tape, &teacher, &one_off, ModalityMask::FULL).unwrap();
    assert_eq!(tape.value(l).item(), 21504.0);

    let masked = ModalityMask::new([false, true, true, true]).unwrap();
    let l = mfd_loss(&mut tape, &teacher, &one_off, masked).unwrap();
    assert_eq!(tape.value(l).item(), 0.0);
}

#[test]
fn mfd_gradient_reaches_students_only() {
    let cfg = tiny_config();
    let params = ParamStore::<f64>::init(&cfg, 3);
    let mut g = Graph::new(&params, true);
    let x = g.tape.constant(volume(16, 2));
    let four = g.tape.concat(&[x, x, x, x], 0).unwrap();
    let teacher = encode(&mut g, four, Branch::Multimodal).unwrap();
    let student = encode(&mut g, x, Branch::Unimodal(ModalityId::T2)).unwrap();
    let l = mfd_loss(
        &mut g.tape,
        &teacher,
        &[None, None, None, Some(student)],
        ModalityMask::only(ModalityId::T2),
    )
    .unwrap();
    g.tape.backward(l).unwrap();
    let grads = g.grads();
    assert!(grads
        .iter()
        .filter(|(k, _)| k.starts_with("enc.multi."))
        .all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    assert!(grads
        .iter()
        .any(|(k, t)| k.starts_with("enc.t2.") && t.data().iter().any(|&v| v != 0.0)));
}

fn cmf_features(cfg: &ModelConfig, seed: u64) -> Vec<Tensor<f64>> {
    let c = cfg.bottleneck();
    (0..4).map(|i| normal(&[c, 2, 2, 2], &mut rng(seed + i))).collect()
}

fn run_cmf(cfg: &ModelConfig, params: &ParamStore<f64>, feats: &[Tensor<f64>], mask: ModalityMask) -> Tensor<f64> {
    let mut g = Graph::new(params, false);
    let vars: [Option<_>; 4] = std::array::from_fn(|i| Some(g.tape.constant(feats[i].clone())));
    let out = cmf_forward(&mut g, cfg, &vars, mask).unwrap();
    g.tape.value(out).clone()
}

#[test]
fn cmf_ignores_dropped_modalities() {
    for cfg in [
        small_config(),
        ModelConfig {
            pairwise_cmf: true,
            ..small_config()
        },
    ] {
        let params = ParamStore::<f64>::init(&cfg, 5);
        let feats = cmf_features(&cfg, 0);
        let mask = ModalityMask::new([true, true, false, true]).unwrap();
        let base = run_cmf(&cfg, &params, &feats, mask);
        let mut r = rng(77);
        for _ in 0..10 {
            let mut f = feats.clone();
            f[ModalityId::T1.ordinal()] = normal(&[cfg.bottleneck(), 2, 2, 2], &mut r).map(|v| v * 1e3);
            assert_eq!(run_cmf(&cfg, &params, &f, mask), base);
        }
    }
}

#[test]
fn cmf_symmetric_slots_pool_like_one_slot() {
    let cfg = ModelConfig {
        convblock: false,
        ..small_config()
    };
    let mut params = ParamStore::<f64>::init(&cfg, 6);
    for m in ModalityId::ALL {
        params
            .get_mut(&format!("cmf.embed.{}", m.key()))
            .unwrap()
            .data_mut()
            .fill(0.0);
    }
    let one = normal(&[cfg.bottleneck(), 2, 2, 2], &mut rng(1));
    let feats = vec![one.clone(), one.clone(), one.clone(), one];
    let full = run_cmf(&cfg, &params, &feats, ModalityMask::FULL);
    let single = run_cmf(&cfg, &params, &feats, ModalityMask::only(ModalityId::T1ce));
    assert!(full.max_abs_diff(&single) < 1e-12);
}

#[test]
fn cmf_pairwise_matches_joint_for_one_modality() {
    let joint = small_config();
    let pairwise = ModelConfig {
        pairwise_cmf: true,
        ..joint.clone()
    };
    let params = ParamStore::<f64>::init(&joint, 8);
    let feats = cmf_features(&joint, 3);
    for m in ModalityId::ALL {
        let mask = ModalityMask::only(m);
        let a = run_cmf(&joint, &params, &feats, mask);
        let b = run_cmf(&pairwise, &params, &feats, mask);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn cmf_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        widths: [2, 2, 2, 2, 4],
        num_heads: 2,
        ..ModelConfig::default()
    };
    let mut params = ParamStore::<f64>::init(&cfg, 9);
    let mut r = rng(10);
    for (_, t) in params.iter_mut() {
        for v in t.data_mut() {
            *v += 0.3 * r.random_range(-1.0..1.0);
        }
    }
    let feats = cmf_features(&cfg, 11);
    let proj: Tensor<f64> = normal(&[4, 2, 2, 2], &mut r);
    let mask = ModalityMask::new([true, false, true, true]).unwrap();
    let loss = |params: &ParamStore<f64>, feats: &[Tensor<f64>], trainable: bool| {
        let mut g = Graph::new(params, trainable);
        let vars: Vec<_> = feats.iter().map(|f| g.tape.leaf(f.clone(), trainable)).collect();
        let slots = std::array::from_fn(|i| Some(vars[i]));
        let out = cmf_forward(&mut g, &cfg, &slots, mask).unwrap();
        let p = g.tape.constant(proj.clone());
        let prod = g.tape.mul(out, p).unwrap();
        let l = g.tape.sum(prod).unwrap();
        let value = g.tape.value(l).item();
        let grads = trainable.then(|| {
            g.tape.backward(l).unwrap();
            let fg: Vec<Tensor<f64>> = vars
                .iter()
                .map(|&v| g.tape.grad(v).cloned().unwrap_or(Tensor::zeros(&[4, 2, 2, 2])))
                .collect();
            (g.grads(), fg)
        });
        (value, grads)
    };
    let (_, grads) = loss(&params, &feats, true);
    let (pgrads, fgrads) = grads.unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (slot, f) in feats.iter().enumerate() {
        for i in 0..f.numel() {
            let mut fp = feats.to_vec();
            fp[slot].data_mut()[i] += h;
            let mut fm = feats.to_vec();
            fm[slot].data_mut()[i] -= h;
            let numeric = (loss(&params, &fp, false).0 - loss(&params, &fm, false).0) / (2.0 * h);
            worst = worst.max(relative_error(fgrads[slot].data()[i], numeric));
        }
    }
    for (key, g) in &pgrads {
        for i in (0..g.numel()).step_by(g.numel().div_ceil(3)) {
            let mut pp = params.clone();
            let orig = pp.get(key).unwrap().data()[i];
            pp.get_mut(key).unwrap().data_mut()[i] = orig + h;
            let plus = loss(&pp, &feats, false).0;
            pp.get_mut(key).unwrap().data_mut()[i] = orig - h;
            let minus = loss(&pp, &feats, false).0;
            worst = worst.max(relative_error(g.data()[i], (plus - minus) / (2.0 * h)));
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn decoder_shapes_at_default_widths() {
    let cfg = ModelConfig::default();
    let params = ParamStore::<f32>::init(&cfg, 0);
    let mut g = Graph::new(&params, false);
    let out = model_forward(&mut g, &cfg, &inputs(32, 1), ModalityMask::FULL, Mode::Train).unwrap();
    assert_eq!(g.tape.shape(out.fusion), &[128, 2, 2, 2]);
    assert_eq!(g.tape.shape(out.seg), &[4, 32, 32, 32]);
    let aux: Vec<Vec<usize>> = out.aux.iter().map(|&a| g.tape.shape(a).to_vec()).collect();
    assert_eq!(
        aux,
        vec![
            vec![4, 16, 16, 16],
            vec![4, 8, 8, 8],
            vec![4, 4, 4, 4],
            vec![4, 2, 2, 2]
        ]
    );
    assert_eq!(out.unimodal.iter().flatten().count(), 4);
    assert!(out.multimodal.is_some() && out.mfd.is_some());
    for v in out
        .unimodal
        .iter()
        .flatten()
        .chain(&out.multimodal)
        .chain([&out.seg])
        .chain(&out.aux)
    {
        assert!(g.tape.value(*v).all_finite());
    }

    let skips: [_; 4] = std::array::from_fn(|l| {
        let s = 32 >> l;
        g.tape.constant(Tensor::zeros(&[cfg.widths[l], s, s, s]))
    });
    let b = g.tape.constant(Tensor::zeros(&[128, 2, 2, 2]));
    let d = decode(&mut g, b, &skips, Branch::Seg, true).unwrap();
    assert_eq!(g.tape.shape(d.logits), &[4, 32, 32, 32]);
    assert_eq!(g.tape.shape(d.aux[0]), &[4, 16, 16, 16]);
}

#[test]
fn zero_weights_give_uniform_softmax() {
    let cfg = small_config();
    let mut params = ParamStore::<f64>::init(&cfg, 0);
    for (_, t) in params.iter_mut() {
        t.data_mut().fill(0.0);
    }
    let mut g = Graph::new(&params, false);
    let out = model_forward(&mut g, &cfg, &inputs(16, 2), ModalityMask::FULL, Mode::Train).unwrap();
    assert!(g.tape.value(out.seg).data().iter().all(|&v| v == 0.0));
    let p = g.tape.softmax(out.seg, 0).unwrap();
    assert!(g.tape.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
}

#[test]
fn inference_reads_only_the_fusion_path() {
    let cfg = ModelConfig::default();
    let params = ParamStore::<f32>::init(&cfg, 0);
    let mask = ModalityMask::only(ModalityId::Flair);
    let x = present_only(&inputs(32, 3), mask);
    let mut g = Graph::new(&params, false);
    let out = model_forward(&mut g, &cfg, &x, mask, Mode::Infer).unwrap();
    assert_eq!(g.tape.shape(out.seg), &[4, 32, 32, 32]);
    assert!(out.aux.is_empty() && out.multimodal.is_none() && out.mfd.is_none());
    let read = params.accessed();
    assert!(!read.is_empty());
    for k in &read {
        let allowed = k.starts_with("enc.flair.")
            || k.starts_with("ufe.flair.")
            || k.starts_with("cmf.")
            || (k.starts_with("dec.seg.") && !k.contains(".aux"));
        assert!(allowed, "inference read {k}");
    }
}

#[test]
fn infer_rejects_inputs_that_disagree_with_the_mask() {
    let cfg = small_config();
    let params = ParamStore::<f32>::init(&cfg, 0);
    let mut g = Graph::new(&params, false);
    let mask = ModalityMask::only(ModalityId::T2);
    let err = model_forward(&mut g, &cfg, &inputs(16, 1), mask, Mode::Infer).unwrap_err();
    assert!(matches!(err, Error::MaskInputMismatch(_)));
    let err = model_forward(&mut g, &cfg, &present_only(&inputs(16, 1), mask), mask, Mode::Train).unwrap_err();
    assert!(matches!(err, Error::MaskInputMismatch(_)));
}

#[test]
fn forward_is_deterministic() {
    let cfg = small_config();
    let params = ParamStore::<f32>::init(&cfg, 4);
    let x = inputs(16, 5);
    let mask = ModalityMask::new([false, true, true, false]).unwrap();
    let run = || {
        let mut g = Graph::new(&params, false);
        let out = model_forward(&mut g, &cfg, &x, mask, Mode::Train).unwrap();
        g.tape.value(out.seg).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn masked_decoder_gets_exactly_zero_gradient() {
    let cfg = small_config();
    let params = ParamStore::<f64>::init(&cfg, 2);
    let mask = ModalityMask::only(ModalityId::Flair);
    let labels = LabelVolume::new([16; 3], (0..4096).map(|i| (i % 4) as u8).collect()).unwrap();
    let mut g = Graph::new(&params, true);
    let out = model_forward(&mut g, &cfg, &inputs(16, 6), mask, Mode::Train).unwrap();
    let l = branch_losses(&mut g.tape, &out, &labels, mask, &[1.0; 4], 1.0).unwrap();
    g.tape.backward(l.l_total).unwrap();
    let grads = g.grads();
    let shapes = param_shapes(&cfg);
    for key in shapes
        .keys()
        .filter(|k| k.starts_with("dec.t1.") || k.starts_with("enc.t2.") || k.starts_with("ufe.t1ce."))
    {
        let zero = grads.get(key).is_none_or(|t| t.data().iter().all(|&v| v == 0.0));
        assert!(zero, "{key} received gradient");
    }
    assert!(grads.keys().any(|k| k.starts_with("dec.flair.")));
}

#[test]
fn key_set_follows_config() {
    let full = param_shapes(&ModelConfig::default());
    assert_eq!(full, param_shapes(&ModelConfig::default()));
    let has = |cfg: ModelConfig, prefix: &str| param_shapes(&cfg).keys().any(|k| k.starts_with(prefix));
    let d = ModelConfig::default;
    assert!(!has(ModelConfig { cmf: false, ..d() }, "cmf."));
    assert!(!has(ModelConfig { mfd: false, ..d() }, "enc.multi."));
    assert!(!has(ModelConfig { mfd: false, ..d() }, "dec.multi."));
    assert!(!has(ModelConfig { ufe: false, ..d() }, "ufe."));
    let no_cb = param_shapes(&ModelConfig {
        convblock: false,
        ..d()
    });
    assert!(!no_cb.keys().any(|k| k.contains(".cb")));
    assert!(full.contains_key("enc.flair.l3.conv.w") && full.contains_key("cmf.attn.wq"));
}

#[test]
fn checkpoint_round_trip_and_key_checks() {
    let cfg = small_config();
    let params = ParamStore::<f32>::init(&cfg, 1);
    let ck = Checkpoint::from_tensors(cfg.digest(), 17, params.iter());
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.step, 17);
    let restored = ParamStore::<f32>::from_map(back.into_tensors());
    restored.check_against(&cfg).unwrap();
    for (k, t) in params.iter() {
        assert_eq!(restored.get(k).unwrap(), t);
    }
    let other = ModelConfig {
        cmf: false,
        ..cfg.clone()
    };
    assert_ne!(other.digest(), cfg.digest());
    assert!(matches!(restored.check_against(&other), Err(Error::KeySetMismatch(_))));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&bad, Path::new("mem")),
        Err(Error::BadMagic { .. })
    ));
    let partial: BTreeMap<String, Tensor<f32>> = params.iter().take(3).map(|(k, t)| (k.clone(), t.clone())).collect();
    assert!(ParamStore::from_map(partial).check_against(&cfg).is_err());
}

/// `cmf.*` and `ufe.*` replaced with noise, so the zero-initialized
/// projections do not already make fusion a no-op.
fn noisy_fusion_params(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    let mut params = ParamStore::<f64>::init(cfg, 0);
    let mut r = rng(seed);
    for (k, t) in params.iter_mut() {
        if k.starts_with("cmf.") || k.starts_with("ufe.") {
            for v in t.data_mut() {
                *v = 0.3 * r.random_range(-1.0..1.0);
            }
        }
    }
    params
}

fn seg_with(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    x: &[Option<Tensor<f64>>; 4],
    mask: ModalityMask,
) -> Tensor<f64> {
    let mut g = Graph::new(params, false);
    let out = model_forward(&mut g, cfg, x, mask, Mode::Train).unwrap();
    g.tape.value(out.seg).clone()
}

#[test]
fn fusion_reaches_the_output_only_above_crop_16() {
    // Instance norm over a 1-voxel bottleneck is constant, so at crop 16 the
    // fused features cannot affect Y_seg. At crop 32 the bottleneck is 2^3.
    let cfg = small_config();
    let a = noisy_fusion_params(&cfg, 1);
    let b = noisy_fusion_params(&cfg, 2);
    let x16 = inputs(16, 3);
    assert_eq!(
        seg_with(&cfg, &a, &x16, ModalityMask::FULL),
        seg_with(&cfg, &b, &x16, ModalityMask::FULL)
    );
    let x32 = inputs(32, 3);
    assert_ne!(
        seg_with(&cfg, &a, &x32, ModalityMask::FULL),
        seg_with(&cfg, &b, &x32, ModalityMask::FULL)
    );
}

#[test]
fn masking_invariance_with_a_live_bottleneck() {
    let cfg = small_config();
    let params = noisy_fusion_params(&cfg, 7);
    let base = inputs(32, 8);
    let mut r = rng(9);
    for mask in ModalityMask::canonical().into_iter().filter(|m| !m.is_full()) {
        let reference = seg_with(&cfg, &params, &base, mask);
        for _ in 0..3 {
            let mut x = base.clone();
            for m in ModalityId::ALL.iter().filter(|&&m| !mask.has(m)) {
                x[m.ordinal()] = Some(normal::<f64>(&[1, 32, 32, 32], &mut r).map(|v| 10.0 * v));
            }
            let y = seg_with(&cfg, &params, &x, mask);
            assert!(
                y.data()
                    .iter()
                    .zip(reference.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
                "{mask:?}"
            );
        }
    }
}

#[test]
fn fusion_gradient_converges_at_crop_32() {
    // At crop 32 the loss has many LeakyReLU kinks within h = 1e-4 of a
    // crossing, so each key only has to agree (to 1e-3) at one of two
    // smaller steps. The MFD term is left out: its L1 sum is large enough to swamp the
    // differences in roundoff.
    let check = |h: f64| {
        ModelCheck {
            crop: 32,
            mask: ModalityMask::new([true, false, true, true]).unwrap(),
            coords_per_tensor: 1,
            h,
            lambda_mfd: 0.0,
            key_prefixes: vec!["ufe.".into(), "cmf.".into(), "dec.seg.l5.".into()],
            ..ModelCheck::default()
        }
        .run()
        .unwrap()
    };
    let (a, b) = (check(1e-5), check(1e-6));
    assert!(a.params.iter().any(|p| p.key.starts_with("cmf.") && p.analytic != 0.0));
    for (p, q) in a.params.iter().zip(&b.params) {
        assert_eq!(p.key, q.key);
        let err = p.max_rel_error.min(q.max_rel_error);
        assert!(err < 1e-3, "{p:?} {q:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn seg_output_ignores_dropped_inputs(bits in 1u8..15, seed in 0u64..1000) {
        let cfg = small_config();
        let params = ParamStore::<f32>::init(&cfg, seed);
        let mask = ModalityMask::from_bits(bits).unwrap();
        let x = inputs::<f32>(16, seed);
        let run = |x: &[Option<Tensor<f32>>; 4]| {
            let mut g = Graph::new(&params, false);
            let out = model_forward(&mut g, &cfg, x, mask, Mode::Train).unwrap();
            g.tape.value(out.seg).clone()
        };
        let base = run(&x);
        let mut r = rng(seed ^ 0xabc);
        for _ in 0..3 {
            let mut y = x.clone();
            for m in ModalityId::ALL.into_iter().filter(|&m| !mask.has(m)) {
                y[m.ordinal()] = Some(normal::<f32>(&[1, 16, 16, 16], &mut r).map(|v| v * 10.0));
            }
            prop_assert_eq!(run(&y), base.clone());
        }
    }
}
