use mctseg_tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{stream_rng, VolumeSample};
use crate::error::{Error, Result};
use crate::losses::LabelVolume;

/// Nested-ellipsoid tumor phantom parameters. Radii are in voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub grid: usize,
    /// Range of whole-tumor semi-axes.
    pub wt_radius: (f64, f64),
    /// Tumor-core semi-axes as a fraction of the whole-tumor ones.
    pub tc_ratio: (f64, f64),
    /// Enhancing-core semi-axes as a fraction of the tumor-core ones.
    pub et_ratio: (f64, f64),
    /// Largest offset of the tumor center from the grid center, per axis.
    pub center_jitter: f64,
    /// Mean intensity per `[class][modality]` (synthetic, not clinical).
    pub contrast: [[f32; 4]; 4],
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Columns: Flair, T1ce, T1, T2. Flair separates edema, T1ce the enhancing
/// core, T1 and T2 the necrotic core.
pub const DEFAULT_CONTRAST: [[f32; 4]; 4] = [
    [0.0, 0.0, 0.0, 0.0],
    [0.5, 0.3, -0.8, 1.0],
    [1.0, 0.15, -0.4, 0.7],
    [0.7, 1.0, -0.2, 0.4],
];

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid: 48,
            wt_radius: (9.0, 13.0),
            tc_ratio: (0.5, 0.65),
            et_ratio: (0.4, 0.6),
            center_jitter: 6.0,
            contrast: DEFAULT_CONTRAST,
            noise_sigma: 0.25,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64), max: f64| {
            if lo > 0.0 && lo <= hi && hi < max {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!(
                    "{name} range ({lo}, {hi}) must satisfy 0 < lo <= hi < {max}"
                )))
            }
        };
        range("wt_radius", self.wt_radius, f64::INFINITY)?;
        range("tc_ratio", self.tc_ratio, 1.0)?;
        range("et_ratio", self.et_ratio, 1.0)?;
        if !(self.noise_sigma >= 0.0) || !(self.center_jitter >= 0.0) {
            return Err(Error::InvalidSpec("noise_sigma and center_jitter must be >= 0".into()));
        }
        if self.wt_radius.1 + self.center_jitter + 1.0 > self.grid as f64 / 2.0 {
            return Err(Error::InvalidSpec(format!(
                "tumor (radius {} + jitter {}) exceeds grid {}",
                self.wt_radius.1, self.center_jitter, self.grid
            )));
        }
        // Every class must be at least ~1.5 voxels thick in the thinnest case.
        let edema = self.wt_radius.0 * (1.0 - self.tc_ratio.1);
        let necrosis = self.wt_radius.0 * self.tc_ratio.0 * (1.0 - self.et_ratio.1);
        let core = self.wt_radius.0 * self.tc_ratio.0 * self.et_ratio.0;
        if edema < 1.5 || necrosis < 1.5 || core < 1.5 {
            return Err(Error::InvalidSpec(
                "radii leave a tumor class thinner than 1.5 voxels".into(),
            ));
        }
        Ok(())
    }
}

fn sample_one(spec: &PhantomSpec, index: usize) -> Result<VolumeSample> {
    let mut rng = stream_rng(spec.seed, index as u64);
    let g = spec.grid;
    let mid = g as f64 / 2.0 - 0.5;
    let center: [f64; 3] = std::array::from_fn(|_| mid + rng.random_range(-spec.center_jitter..=spec.center_jitter));
    let wt: [f64; 3] = std::array::from_fn(|_| rng.random_range(spec.wt_radius.0..=spec.wt_radius.1));
    let tc_s = rng.random_range(spec.tc_ratio.0..=spec.tc_ratio.1);
    let et_s = rng.random_range(spec.et_ratio.0..=spec.et_ratio.1);
    let tc = wt.map(|r| r * tc_s);
    let et = tc.map(|r| r * et_s);

    let inside =
        |r: &[f64; 3], p: [f64; 3]| -> bool { (0..3).map(|a| ((p[a] - center[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0 };
    let n = g * g * g;
    let mut labels = Vec::with_capacity(n);
    for z in 0..g {
        for y in 0..g {
            for x in 0..g {
                let p = [z as f64, y as f64, x as f64];
                labels.push(if inside(&et, p) {
                    3
                } else if inside(&tc, p) {
                    1
                } else if inside(&wt, p) {
                    2
                } else {
                    0
                });
            }
        }
    }
    let labels = LabelVolume::new([g, g, g], labels)?;
    if labels.counts().contains(&0) {
        return Err(Error::InvalidSpec(format!("sample {index} is missing a tumor class")));
    }
    let images = std::array::from_fn(|m| {
        let data = labels
            .data()
            .iter()
            .map(|&c| {
                let noise: f64 = rng.sample(StandardNormal);
                spec.contrast[c as usize][m] + (spec.noise_sigma * noise) as f32
            })
            .collect();
        Tensor::new(&[1, g, g, g], data).expect("grid shape")
    });
    VolumeSample::new(format!("phantom_{index:04}"), images, labels)
}

/// `n` phantoms; sample `i` depends only on `(spec, i)`.
pub fn generate_phantom(spec: &PhantomSpec, n: usize) -> Result<Vec<VolumeSample>> {
    generate_range(spec, 0..n)
}

/// Phantoms with indices in `range`, so disjoint splits can share one spec.
pub fn generate_range(spec: &PhantomSpec, range: std::ops::Range<usize>) -> Result<Vec<VolumeSample>> {
    spec.validate()?;
    if range.is_empty() {
        return Err(Error::InvalidSpec("need at least one sample".into()));
    }
    range.into_par_iter().map(|i| sample_one(spec, i)).collect()
}
