//! Multimodal brain-tumor segmentation that stays usable when MRI modalities
//! are missing.
//!
//! The network distills a four-modality teacher encoder into per-modality
//! student encoders, enhances each modality with a parallel
//! attention/ConvBlock block, fuses the available modalities with masked
//! cross-modal attention, and decodes with deep supervision. Everything runs
//! on the small autodiff engine in [`mctseg_tensor`].

pub mod blocks;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod modality;
pub mod model;
pub mod train;

pub use error::{Error, Result};
pub use modality::{ModalityId, ModalityMask};
