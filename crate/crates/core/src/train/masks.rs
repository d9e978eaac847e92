use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::modality::ModalityMask;

/// How training masks are drawn each step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaskDist {
    /// Uniform over the 15 non-empty subsets.
    Uniform15,
    /// Each modality dropped independently with probability `q`; an empty
    /// draw is rejected and redrawn.
    Bernoulli(f64),
    /// Always the complete set.
    Full,
}

impl fmt::Display for MaskDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Uniform15 => f.write_str("uniform15"),
            Self::Bernoulli(q) => write!(f, "bernoulli({q})"),
            Self::Full => f.write_str("full"),
        }
    }
}

impl FromStr for MaskDist {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "uniform15" => Ok(Self::Uniform15),
            "full" => Ok(Self::Full),
            other => {
                let q = other
                    .strip_prefix("bernoulli(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|q| q.trim().parse::<f64>().ok())
                    .ok_or_else(|| format!("unknown mask distribution {other:?}"))?;
                if (0.0..1.0).contains(&q) {
                    Ok(Self::Bernoulli(q))
                } else {
                    Err(format!("bernoulli drop rate {q} must be in [0, 1)"))
                }
            }
        }
    }
}

pub fn sample_modality_mask(rng: &mut impl Rng, dist: MaskDist) -> ModalityMask {
    match dist {
        MaskDist::Uniform15 => ModalityMask::from_bits(rng.random_range(1u8..16)).expect("non-empty"),
        MaskDist::Full => ModalityMask::FULL,
        MaskDist::Bernoulli(q) => loop {
            let delta: [bool; 4] = std::array::from_fn(|_| !rng.random_bool(q));
            if let Ok(m) = ModalityMask::new(delta) {
                break m;
            }
        },
    }
}
