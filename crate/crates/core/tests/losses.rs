mod common;

use common::{normal, rng, small_config};
use mctseg::losses::{
    branch_losses, class_weights, cross_entropy, dice_loss, dice_score, region_map, wce_loss, LabelVolume, RegionId,
    DICE_EPS,
};
use mctseg::model::{model_forward, Graph, Mode, ParamStore};
use mctseg::{Error, ModalityId, ModalityMask};
use mctseg_tensor::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn labels(dims: [usize; 3], data: Vec<u8>) -> LabelVolume {
    LabelVolume::new(dims, data).unwrap()
}

fn random_labels(n: usize, seed: u64) -> LabelVolume {
    let mut r = rng(seed);
    labels([1, 1, n], (0..n).map(|_| r.random_range(0..4u8)).collect())
}

#[test]
fn dice_hand_cases() {
    let t = labels([1, 1, 5], vec![3, 3, 3, 0, 0]);
    assert_eq!(dice_score(&t, &t, RegionId::Et).unwrap(), 1.0);
    let disjoint = labels([1, 1, 5], vec![0, 0, 0, 3, 3]);
    assert_eq!(dice_score(&disjoint, &t, RegionId::Et).unwrap(), 0.0);
    let p = labels([1, 1, 5], vec![3, 3, 0, 0, 0]);
    assert_eq!(dice_score(&p, &t, RegionId::Et).unwrap(), 0.8);
    let empty = labels([1, 1, 5], vec![2; 5]);
    assert_eq!(dice_score(&empty, &empty, RegionId::Et).unwrap(), 1.0);
    let other = labels([1, 1, 4], vec![0; 4]);
    assert!(matches!(dice_score(&other, &t, RegionId::Wt), Err(Error::Shape(_))));
}

#[test]
fn region_membership() {
    let l = labels([1, 1, 4], vec![0, 1, 2, 3]);
    assert_eq!(region_map(&l, RegionId::Et), vec![false, false, false, true]);
    assert_eq!(region_map(&l, RegionId::Tc), vec![false, true, false, true]);
    assert_eq!(region_map(&l, RegionId::Wt), vec![false, true, true, true]);
}

#[test]
fn label_values_are_validated() {
    assert!(LabelVolume::new([1, 1, 2], vec![0, 4]).is_err());
    assert!(LabelVolume::new([1, 1, 2], vec![0]).is_err());
}

#[test]
fn wce_examples() {
    let target = random_labels(30, 1);
    let mut tape = Tape::<f64>::new();
    let zeros = tape.constant(Tensor::zeros(&[4, 1, 1, 30]));
    let l = wce_loss(&mut tape, zeros, &target, &[1.0; 4]).unwrap();
    assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-6);

    let logits: Tensor<f64> = normal(&[4, 1, 1, 30], &mut rng(2));
    let x = tape.constant(logits);
    let w = [0.3, 1.7, 0.9, 2.2];
    let a = wce_loss(&mut tape, x, &target, &w).unwrap();
    let b = wce_loss(&mut tape, x, &target, &w.map(|v| 2.0 * v)).unwrap();
    assert!((2.0 * tape.value(a).item() - tape.value(b).item()).abs() < 1e-12);

    let u = wce_loss(&mut tape, x, &target, &[1.0; 4]).unwrap();
    let ce = cross_entropy(&mut tape, x, &target).unwrap();
    assert_eq!(tape.value(u).item().to_bits(), tape.value(ce).item().to_bits());

    let mut confident = Tensor::zeros(&[4, 1, 1, 30]);
    for (v, &y) in target.data().iter().enumerate() {
        let o = confident.offset(&[y as usize, 0, 0, v]);
        confident.data_mut()[o] = 60.0;
    }
    let c = tape.constant(confident);
    let l = wce_loss(&mut tape, c, &target, &w).unwrap();
    assert!(tape.value(l).item() < 1e-20);

    let bad = wce_loss(&mut tape, x, &target, &[1.0, 0.0, 1.0, 1.0]).unwrap_err();
    assert!(matches!(bad, Error::NonPositiveWeight(_)));
}

#[test]
fn dice_loss_examples() {
    let target = labels([1, 2, 2], vec![0, 1, 2, 3]);
    let mut tape = Tape::<f64>::new();
    let mut perfect = Tensor::full(&[4, 1, 2, 2], -80.0);
    for v in 0..4 {
        let o = perfect.offset(&[v, 0, v / 2, v % 2]);
        perfect.data_mut()[o] = 80.0;
    }
    let x = tape.constant(perfect.clone());
    let l = dice_loss(&mut tape, x, &target, DICE_EPS).unwrap();
    assert!(tape.value(l).item().abs() < 1e-6);

    // Class 3 absent and never predicted: its term is eps/eps = 1.
    let no_et = labels([1, 2, 2], vec![0, 1, 2, 2]);
    let mut p = perfect;
    for v in 0..4 {
        let y = no_et.data()[v] as usize;
        for c in 0..4 {
            let o = p.offset(&[c, 0, v / 2, v % 2]);
            p.data_mut()[o] = if c == y { 80.0 } else { -80.0 };
        }
    }
    let x = tape.constant(p);
    let l = dice_loss(&mut tape, x, &no_et, DICE_EPS).unwrap();
    assert!(tape.value(l).item().abs() < 1e-6);

    // Uniform p, target all class 3: class-3 term 0.4, classes 1 and 2 have
    // predicted mass but no truth, so their terms are ~0.
    let n = 10;
    let all_et = labels([1, 1, n], vec![3; n]);
    let u = tape.constant(Tensor::zeros(&[4, 1, 1, n]));
    let l = dice_loss(&mut tape, u, &all_et, 0.0).unwrap();
    let expected = 1.0 - (0.0 + 0.0 + 0.4) / 3.0;
    assert!((tape.value(l).item() - expected).abs() < 1e-12);
}

#[test]
fn dice_loss_decreases_toward_the_target() {
    let target = random_labels(40, 3);
    let mut r = rng(4);
    let p0: Vec<[f64; 4]> = (0..40)
        .map(|_| {
            let w: [f64; 4] = std::array::from_fn(|_| r.random_range(0.1..1.0));
            let s: f64 = w.iter().sum();
            w.map(|v| v / s)
        })
        .collect();
    let mut prev = f64::INFINITY;
    for k in 0..10 {
        let t = k as f64 / 10.0;
        let mut logits = Tensor::zeros(&[4, 1, 1, 40]);
        for (v, p) in p0.iter().enumerate() {
            for c in 0..4 {
                let one = if target.data()[v] as usize == c { 1.0 } else { 0.0 };
                let o = logits.offset(&[c, 0, 0, v]);
                logits.data_mut()[o] = ((1.0 - t) * p[c] + t * one).ln();
            }
        }
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(logits);
        let l = dice_loss(&mut tape, x, &target, DICE_EPS).unwrap();
        let l = tape.value(l).item();
        assert!(l < prev, "step {k}: {l} >= {prev}");
        prev = l;
    }
}

#[test]
fn breakdown_sums_and_masks() {
    let cfg = small_config();
    let params = ParamStore::<f64>::init(&cfg, 0);
    let x: [Option<Tensor<f64>>; 4] = std::array::from_fn(|i| Some(normal(&[1, 16, 16, 16], &mut rng(i as u64))));
    let target = labels([16; 3], (0..4096).map(|i| ((i / 7) % 4) as u8).collect());
    let w = [0.5, 1.5, 1.0, 2.0];

    let mask = ModalityMask::only(ModalityId::Flair);
    let mut g = Graph::new(&params, false);
    let out = model_forward(&mut g, &cfg, &x, mask, Mode::Train).unwrap();
    let l = branch_losses(&mut g.tape, &out, &target, mask, &w, 0.7).unwrap();
    let v = l.values(&g.tape);
    assert_eq!(
        v.l_total.to_bits(),
        ((((v.l_um + v.l_mm) + v.l_seg) + v.l_layer) + 0.7 * v.l_mfd).to_bits()
    );

    // One modality term in l_um: it equals the Flair branch's own loss.
    let flair = out.unimodal[0].unwrap();
    let a = wce_loss(&mut g.tape, flair, &target, &w).unwrap();
    let b = dice_loss(&mut g.tape, flair, &target, DICE_EPS).unwrap();
    let single = g.tape.value(a).item() + g.tape.value(b).item();
    assert_eq!(v.l_um, single);

    let full = model_forward(&mut g, &cfg, &x, ModalityMask::FULL, Mode::Train).unwrap();
    let lf = branch_losses(&mut g.tape, &full, &target, ModalityMask::FULL, &w, 0.0)
        .unwrap()
        .values(&g.tape);
    assert!(lf.l_um > v.l_um && lf.l_mfd > 0.0);
    assert_eq!(lf.l_total, ((lf.l_um + lf.l_mm) + lf.l_seg) + lf.l_layer);
}

#[test]
fn class_weights_normalized_and_clamped() {
    let l = labels([1, 1, 10], vec![0, 0, 0, 0, 0, 0, 1, 2, 2, 3]);
    let w = class_weights([&l]);
    assert!(w.iter().all(|&v| (0.1..=10.0).contains(&v)));
    assert!(w[0] < w[2] && w[2] < w[1]);
    assert_eq!(w[1], w[3]);
}

proptest! {
    #[test]
    fn dice_symmetric_and_one_iff_identical(seed in 0u64..10_000, n in 1usize..40) {
        let a = random_labels(n, seed);
        let b = random_labels(n, seed + 1);
        for r in RegionId::ALL {
            let ab = dice_score(&a, &b, r).unwrap();
            prop_assert_eq!(ab, dice_score(&b, &a, r).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 1.0, region_map(&a, r) == region_map(&b, r));
        }
    }

    #[test]
    fn majority_downsample_halves_dims(d in 1usize..6, h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
        let mut r = rng(seed);
        let l = labels([d, h, w], (0..d * h * w).map(|_| r.random_range(0..4u8)).collect());
        let s = l.downsample_majority();
        prop_assert_eq!(s.dims(), [d.div_ceil(2), h.div_ceil(2), w.div_ceil(2)]);
        // Each coarse label occurs in its block.
        for z in 0..s.dims()[0] {
            for y in 0..s.dims()[1] {
                for x in 0..s.dims()[2] {
                    let c = s.at(z, y, x);
                    let mut found = false;
                    for dz in 0..2 { for dy in 0..2 { for dx in 0..2 {
                        let (zz, yy, xx) = (2 * z + dz, 2 * y + dy, 2 * x + dx);
                        if zz < d && yy < h && xx < w && l.at(zz, yy, xx) == c { found = true; }
                    }}}
                    prop_assert!(found);
                }
            }
        }
    }
}
