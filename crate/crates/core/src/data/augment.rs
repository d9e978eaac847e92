use mctseg_tensor::Tensor;
use rand::Rng;

use super::VolumeSample;
use crate::error::{Error, Result};
use crate::losses::LabelVolume;

/// `(x - mean) / max(std, 1e-8)` over the whole volume (population std).
pub fn zscore_normalize(x: &Tensor<f32>) -> Tensor<f32> {
    let n = x.numel() as f64;
    let mean = x.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    x.map(|v| ((v as f64 - mean) / std) as f32)
}

/// A lattice orientation of a cube: output axis `a` reads input axis
/// `perm[a]`, reversed when `flip[a]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Orientation {
    pub perm: [usize; 3],
    pub flip: [bool; 3],
}

impl Orientation {
    pub const IDENTITY: Orientation = Orientation {
        perm: [0, 1, 2],
        flip: [false; 3],
    };

    /// The 24 proper rotations (determinant +1).
    pub fn rotations() -> Vec<Orientation> {
        const PERMS: [([usize; 3], bool); 6] = [
            ([0, 1, 2], true),
            ([0, 2, 1], false),
            ([1, 0, 2], false),
            ([1, 2, 0], true),
            ([2, 0, 1], true),
            ([2, 1, 0], false),
        ];
        let mut out = Vec::with_capacity(24);
        for (perm, even) in PERMS {
            for bits in 0u8..8 {
                let flip = [bits & 1 != 0, bits & 2 != 0, bits & 4 != 0];
                let odd_flips = flip.iter().filter(|&&f| f).count() % 2 == 1;
                if even != odd_flips {
                    out.push(Orientation { perm, flip });
                }
            }
        }
        out
    }

    /// Follow `self` with independent mirror flips of the output axes.
    pub fn mirrored(self, mirror: [bool; 3]) -> Self {
        Self {
            perm: self.perm,
            flip: std::array::from_fn(|a| self.flip[a] ^ mirror[a]),
        }
    }
}

/// Crop-and-reorient as one gather: a `crop³` window at `corner`, then
/// `orient`.
#[derive(Clone, Copy, Debug)]
struct Window {
    corner: [usize; 3],
    crop: usize,
    orient: Orientation,
}

impl Window {
    fn gather<V: Copy>(&self, src: &[V], dims: [usize; 3]) -> Vec<V> {
        let c = self.crop;
        let mut out = Vec::with_capacity(c * c * c);
        let mut idx = [0usize; 3];
        for i0 in 0..c {
            for i1 in 0..c {
                for i2 in 0..c {
                    for (a, &i) in [i0, i1, i2].iter().enumerate() {
                        let axis = self.orient.perm[a];
                        let local = if self.orient.flip[a] { c - 1 - i } else { i };
                        idx[axis] = self.corner[axis] + local;
                    }
                    out.push(src[(idx[0] * dims[1] + idx[1]) * dims[2] + idx[2]]);
                }
            }
        }
        out
    }

    fn apply(&self, s: &VolumeSample, shift: [f32; 4]) -> VolumeSample {
        let dims = s.dims();
        let c = self.crop;
        let images = std::array::from_fn(|m| {
            let data = self
                .gather(s.images[m].data(), dims)
                .into_iter()
                .map(|v| v + shift[m])
                .collect();
            Tensor::new(&[1, c, c, c], data).expect("crop shape")
        });
        let labels = LabelVolume::new([c; 3], self.gather(s.labels.data(), dims)).expect("labels stay valid");
        VolumeSample {
            id: s.id.clone(),
            images,
            labels,
        }
    }
}

fn check_crop(s: &VolumeSample, crop: usize) -> Result<()> {
    let dims = s.dims();
    if crop == 0 || dims.iter().any(|&d| crop > d) {
        return Err(Error::CropTooLarge { crop, dims });
    }
    Ok(())
}

/// Random crop, one of 24 rotations, per-modality intensity shift in
/// `[-0.1, 0.1]`, then a mirror flip of each axis with probability 1/2.
/// Labels follow every spatial transform and no intensity transform.
pub fn augment(s: &VolumeSample, crop: usize, rng: &mut impl Rng) -> Result<VolumeSample> {
    check_crop(s, crop)?;
    let dims = s.dims();
    let corner = dims.map(|d| rng.random_range(0..=d - crop));
    let rotations = Orientation::rotations();
    let rotation = rotations[rng.random_range(0..rotations.len())];
    let shift: [f32; 4] = std::array::from_fn(|_| rng.random_range(-0.1f32..=0.1));
    let mirror: [bool; 3] = std::array::from_fn(|_| rng.random_bool(0.5));
    let w = Window {
        corner,
        crop,
        orient: rotation.mirrored(mirror),
    };
    Ok(w.apply(s, shift))
}

/// Deterministic central `crop³` window (evaluation and unaugmented training).
pub fn center_crop(s: &VolumeSample, crop: usize) -> Result<VolumeSample> {
    check_crop(s, crop)?;
    transform(s, crop, s.dims().map(|d| (d - crop) / 2), Orientation::IDENTITY)
}

/// Explicit crop window and orientation, without intensity changes.
pub fn transform(s: &VolumeSample, crop: usize, corner: [usize; 3], orient: Orientation) -> Result<VolumeSample> {
    check_crop(s, crop)?;
    let dims = s.dims();
    if (0..3).any(|a| corner[a] + crop > dims[a]) {
        return Err(Error::CropTooLarge { crop, dims });
    }
    Ok(Window { corner, crop, orient }.apply(s, [0.0; 4]))
}
