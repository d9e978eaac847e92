use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Output classes: background, necrosis/non-enhancing, edema, enhancing.
pub const NUM_CLASSES: usize = 4;

/// Architecture of the whole network. Everything that changes the parameter
/// key set or the forward graph lives here and feeds the checkpoint digest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Channel width of encoder layers 1..=5.
    pub widths: [usize; 5],
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub ufe_depth: usize,
    pub mfd: bool,
    pub ufe: bool,
    pub cmf: bool,
    pub convblock: bool,
    /// Fuse with explicit per-pair attention instead of one joint sequence.
    pub pairwise_cmf: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 32, 64, 128],
            num_heads: 4,
            ffn_mult: 4,
            ufe_depth: 1,
            mfd: true,
            ufe: true,
            cmf: true,
            convblock: true,
            pairwise_cmf: false,
        }
    }
}

impl ModelConfig {
    pub fn bottleneck(&self) -> usize {
        self.widths[4]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Config("widths must be positive".into()));
        }
        if self.num_heads == 0 || self.bottleneck() % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads ({}) must divide the bottleneck width ({})",
                self.num_heads,
                self.bottleneck()
            )));
        }
        if self.ffn_mult == 0 {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        if self.ufe && self.ufe_depth == 0 {
            return Err(Error::Config("ufe_depth must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form; the digest is computed over these bytes.
    pub fn describe(&self) -> String {
        let w: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        format!(
            "widths={}\nnum_heads={}\nffn_mult={}\nufe_depth={}\nmfd={}\nufe={}\ncmf={}\nconvblock={}\npairwise_cmf={}\n",
            w.join(","),
            self.num_heads,
            self.ffn_mult,
            self.ufe_depth,
            self.mfd,
            self.ufe,
            self.cmf,
            self.convblock,
            self.pairwise_cmf
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.describe().as_bytes()).into()
    }
}

/// Spatial sizes the encoder accepts: multiples of 16, or the tiny powers of
/// two used by gradient checks (which collapse to one voxel early).
pub fn check_crop_dims(dims: &[usize]) -> Result<()> {
    for &n in dims {
        if n == 0 || !(n % 16 == 0 || (n.is_power_of_two() && n < 16)) {
            return Err(Error::Shape(format!(
                "spatial dims {dims:?} must be multiples of 16 (or powers of two below 16)"
            )));
        }
    }
    Ok(())
}
