use std::path::PathBuf;

use mctseg_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Shape(String),
    #[error("modality {0} is present in the input but masked off (or missing but unmasked)")]
    MaskInputMismatch(&'static str),
    #[error("modality mask has no available modality")]
    AllModalitiesMissing,
    #[error("class weight {0} is not positive")]
    NonPositiveWeight(f64),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("crop {crop} does not fit volume {dims:?}")]
    CropTooLarge { crop: usize, dims: [usize; 3] },
    #[error("{path}: bad magic bytes")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported format version {version}")]
    VersionUnsupported { path: PathBuf, version: u32 },
    #[error("{path}: file is truncated")]
    TruncatedFile { path: PathBuf },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("checkpoint was written for a different model config (digest mismatch)")]
    DigestMismatch,
    #[error("checkpoint parameters do not match the model: {0}")]
    KeySetMismatch(String),
    #[error("non-finite loss at step {step}")]
    NanLoss { step: u64 },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("gradient check failed: worst offender {name} (relative error {error:.3e})")]
    GradcheckFailed { name: String, error: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io {
            path: path.into(),
            source,
        })
    }
}
