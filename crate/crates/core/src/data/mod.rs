//! Synthetic four-modality phantoms, normalization, augmentation and the
//! on-disk volume format.

pub mod augment;
pub mod phantom;
pub mod volume;

use std::fs;
use std::path::Path;

use mctseg_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, IoContext, Result};
use crate::losses::LabelVolume;
use crate::modality::ModalityId;

pub use augment::{augment, center_crop, transform, zscore_normalize, Orientation};
pub use phantom::{generate_phantom, generate_range, PhantomSpec, DEFAULT_CONTRAST};
pub use volume::{read_volume, write_volume};

/// Four aligned modality volumes (`[1, D, H, W]` each) plus labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub id: String,
    /// Indexed by [`ModalityId::ordinal`].
    pub images: [Tensor<f32>; 4],
    pub labels: LabelVolume,
}

impl VolumeSample {
    pub fn new(id: String, images: [Tensor<f32>; 4], labels: LabelVolume) -> Result<Self> {
        let [d, h, w] = labels.dims();
        for (m, img) in ModalityId::ALL.iter().zip(&images) {
            if img.shape() != [1, d, h, w] {
                return Err(Error::Shape(format!(
                    "{m} volume {:?} vs labels {:?}",
                    img.shape(),
                    labels.dims()
                )));
            }
            if !img.all_finite() {
                return Err(Error::Shape(format!("{m} volume has non-finite intensities")));
            }
        }
        Ok(Self { id, images, labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.labels.dims()
    }

    pub fn image(&self, m: ModalityId) -> &Tensor<f32> {
        &self.images[m.ordinal()]
    }

    /// Z-scores every modality volume independently.
    pub fn normalized(&self) -> Self {
        Self {
            id: self.id.clone(),
            images: self.images.each_ref().map(zscore_normalize),
            labels: self.labels.clone(),
        }
    }
}

/// Independent random stream `stream` under master `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const MANIFEST: &str = "manifest.txt";

/// Writes `<root>/<split>/<id>.mctv` for every sample plus a manifest.
pub fn write_split(root: &Path, split: &str, samples: &[VolumeSample]) -> Result<()> {
    let dir = root.join(split);
    fs::create_dir_all(&dir).at(&dir)?;
    let mut manifest = String::new();
    for s in samples {
        write_volume(&dir.join(format!("{}.mctv", s.id)), s)?;
        manifest.push_str(&s.id);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).at(path)
}

/// Reads every sample listed in `<root>/<split>/manifest.txt`, in order.
pub fn read_split(root: &Path, split: &str) -> Result<Vec<VolumeSample>> {
    let dir = root.join(split);
    let path = dir.join(MANIFEST);
    let manifest = fs::read_to_string(&path).at(&path)?;
    manifest
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| read_volume(&dir.join(format!("{id}.mctv"))))
        .collect()
}
