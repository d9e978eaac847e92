mod common;

use std::path::Path;

use common::{rng, small_phantom_spec};
use mctseg::data::volume::{parse_volume, volume_bytes};
use mctseg::data::{
    augment, center_crop, generate_phantom, generate_range, read_split, read_volume, transform, write_split,
    write_volume, zscore_normalize, Orientation, PhantomSpec, VolumeSample,
};
use mctseg::Error;
use mctseg_tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn mean_std(x: &Tensor<f32>) -> (f64, f64) {
    let n = x.numel() as f64;
    let m = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let v = x.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn class_means(s: &VolumeSample, m: usize) -> [f64; 4] {
    let mut sum = [0.0; 4];
    let mut n = [0usize; 4];
    for (&c, &v) in s.labels.data().iter().zip(s.images[m].data()) {
        sum[c as usize] += v as f64;
        n[c as usize] += 1;
    }
    std::array::from_fn(|c| sum[c] / n[c].max(1) as f64)
}

fn one_phantom() -> VolumeSample {
    generate_phantom(&small_phantom_spec(3), 1).unwrap().remove(0)
}

#[test]
fn phantoms_are_deterministic_and_complete() {
    let spec = small_phantom_spec(11);
    let a = generate_phantom(&spec, 3).unwrap();
    let b = generate_phantom(&spec, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(generate_range(&spec, 1..3).unwrap(), a[1..].to_vec());
    let other = generate_phantom(&small_phantom_spec(12), 1).unwrap();
    assert_ne!(other[0].images[0], a[0].images[0]);

    for s in &a {
        assert_eq!(s.dims(), [32; 3]);
        let counts = s.labels.counts();
        assert!(counts.iter().all(|&c| c > 0));
    }
}

#[test]
fn noiseless_phantom_has_four_intensity_levels() {
    let spec = PhantomSpec {
        noise_sigma: 0.0,
        ..small_phantom_spec(5)
    };
    let s = &generate_phantom(&spec, 1).unwrap()[0];
    for m in 0..4 {
        for (&c, &v) in s.labels.data().iter().zip(s.images[m].data()) {
            assert_eq!(v, spec.contrast[c as usize][m]);
        }
    }
    let mut flair: Vec<u32> = s.images[0].data().iter().map(|v| v.to_bits()).collect();
    flair.sort_unstable();
    flair.dedup();
    assert_eq!(flair.len(), 4);
}

#[test]
fn invalid_phantom_specs_rejected() {
    let bad = PhantomSpec {
        wt_radius: (20.0, 10.0),
        ..PhantomSpec::default()
    };
    assert!(matches!(generate_phantom(&bad, 1), Err(Error::InvalidSpec(_))));
    let tiny = PhantomSpec {
        grid: 8,
        wt_radius: (1.0, 1.5),
        ..PhantomSpec::default()
    };
    assert!(generate_phantom(&tiny, 1).is_err());
}

#[test]
fn zscore_examples() {
    let s = one_phantom();
    let z = zscore_normalize(&s.images[1]);
    let (m, sd) = mean_std(&z);
    assert!(m.abs() < 1e-5 && (sd - 1.0).abs() < 1e-4);

    let flat = Tensor::full(&[1, 4, 4, 4], 3.5f32);
    assert!(zscore_normalize(&flat).data().iter().all(|&v| v == 0.0));

    let scaled = s.images[1].map(|v| 2.5 * v - 7.0);
    let zs = zscore_normalize(&scaled);
    for (a, b) in z.data().iter().zip(zs.data()) {
        assert!((a - b).abs() < 1e-4);
    }
    let twice = zscore_normalize(&z);
    for (a, b) in z.data().iter().zip(twice.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn double_flip_is_identity() {
    let s = one_phantom();
    for a in 0..3 {
        let mut flip = [false; 3];
        flip[a] = true;
        let o = Orientation { perm: [0, 1, 2], flip };
        let once = transform(&s, 32, [0; 3], o).unwrap();
        assert_ne!(once, s);
        assert_eq!(transform(&once, 32, [0; 3], o).unwrap(), s);
    }
}

#[test]
fn rotations_preserve_class_counts() {
    let s = one_phantom();
    for o in Orientation::rotations() {
        let r = transform(&s, 32, [0; 3], o.mirrored([true, false, true])).unwrap();
        assert_eq!(r.labels.counts(), s.labels.counts());
        for m in 0..4 {
            let (a, b) = (class_means(&s, m), class_means(&r, m));
            for c in 0..4 {
                assert!((a[c] - b[c]).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn augment_shapes_and_intensity_shift() {
    let s = one_phantom();
    let mut r = rng(0);
    for _ in 0..20 {
        let a = augment(&s, 32, &mut r).unwrap();
        assert_eq!(a.labels.counts(), s.labels.counts());
        for m in 0..4 {
            let (x, y) = (class_means(&s, m), class_means(&a, m));
            let shift = y[0] - x[0];
            assert!(shift.abs() <= 0.1 + 1e-5);
            for c in 1..4 {
                assert!((y[c] - x[c] - shift).abs() < 1e-4);
            }
        }
        let small = augment(&s, 16, &mut r).unwrap();
        assert_eq!(small.dims(), [16; 3]);
        assert!(small.images.iter().all(|t| t.shape() == [1, 16, 16, 16]));
    }
    assert!(matches!(
        augment(&s, 40, &mut r),
        Err(Error::CropTooLarge { crop: 40, .. })
    ));
    assert!(matches!(center_crop(&s, 33), Err(Error::CropTooLarge { .. })));
}

#[test]
fn center_crop_takes_the_middle() {
    let s = one_phantom();
    let c = center_crop(&s, 16).unwrap();
    assert_eq!(c.labels.at(0, 0, 0), s.labels.at(8, 8, 8));
    assert_eq!(c.labels.at(15, 15, 15), s.labels.at(23, 23, 23));
    assert_eq!(center_crop(&s, 16).unwrap(), c);
}

#[test]
fn volume_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = one_phantom();
    let path = dir.path().join(format!("{}.mctv", s.id));
    write_volume(&path, &s).unwrap();
    assert_eq!(read_volume(&path).unwrap(), s);

    let bytes = volume_bytes(&s);
    let p = Path::new("x.mctv");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(parse_volume(&bad, "x".into(), p), Err(Error::BadMagic { .. })));
    let mut v2 = bytes.clone();
    v2[4] = 2;
    assert!(matches!(
        parse_volume(&v2, "x".into(), p),
        Err(Error::VersionUnsupported { version: 2, .. })
    ));
    for cut in [3, 10, bytes.len() - 1] {
        assert!(matches!(
            parse_volume(&bytes[..cut], "x".into(), p),
            Err(Error::TruncatedFile { .. })
        ));
    }
    let mut label5 = bytes.clone();
    *label5.last_mut().unwrap() = 5;
    assert!(parse_volume(&label5, "x".into(), p).is_err());
}

#[test]
fn splits_round_trip_in_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut samples = generate_phantom(&small_phantom_spec(1), 3).unwrap();
    samples.reverse();
    write_split(dir.path(), "train", &samples).unwrap();
    assert_eq!(read_split(dir.path(), "train").unwrap(), samples);
    assert!(matches!(read_split(dir.path(), "eval"), Err(Error::Io { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn zscore_is_affine_invariant(seed in 0u64..1000, a in 0.1f32..10.0, b in -5f32..5.0) {
        let mut r = rng(seed);
        let x = Tensor::new(&[1, 3, 4, 5], (0..60).map(|_| r.random_range(-2f32..2.0)).collect()).unwrap();
        let z = zscore_normalize(&x);
        let zs = zscore_normalize(&x.map(|v| a * v + b));
        for (p, q) in z.data().iter().zip(zs.data()) {
            prop_assert!((p - q).abs() < 1e-3);
        }
    }

    #[test]
    fn transforms_permute_voxels(k in 0usize..24, mirror in any::<[bool; 3]>(), seed in 0u64..100) {
        let mut r = rng(seed);
        let labels = mctseg::losses::LabelVolume::new([6; 3], (0..216).map(|_| r.random_range(0..4u8)).collect()).unwrap();
        let img = Tensor::new(&[1, 6, 6, 6], (0..216).map(|i| i as f32).collect()).unwrap();
        let s = VolumeSample::new("p".into(), std::array::from_fn(|_| img.clone()), labels).unwrap();
        let o = Orientation::rotations()[k].mirrored(mirror);
        let t = transform(&s, 6, [0; 3], o).unwrap();
        let mut seen: Vec<f32> = t.images[0].data().to_vec();
        seen.sort_by(f32::total_cmp);
        prop_assert_eq!(seen, img.data().to_vec());
        prop_assert_eq!(t.labels.counts(), s.labels.counts());
        // Labels travel with their voxels.
        for (v, &val) in t.images[0].data().iter().enumerate() {
            prop_assert_eq!(t.labels.data()[v], s.labels.data()[val as usize]);
        }
    }
}
