use std::fmt;

use crate::error::{Error, Result};

/// One MRI contrast. The ordinal is part of every on-disk format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModalityId {
    Flair = 0,
    T1ce = 1,
    T1 = 2,
    T2 = 3,
}

impl ModalityId {
    pub const ALL: [ModalityId; 4] = [Self::Flair, Self::T1ce, Self::T1, Self::T2];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn from_ordinal(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Lower-case name used in parameter paths and file names.
    pub fn key(self) -> &'static str {
        match self {
            Self::Flair => "flair",
            Self::T1ce => "t1ce",
            Self::T1 => "t1",
            Self::T2 => "t2",
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Flair => "Flair",
            Self::T1ce => "T1ce",
            Self::T1 => "T1",
            Self::T2 => "T2",
        })
    }
}

/// Availability indicator per modality; never empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModalityMask([bool; 4]);

impl ModalityMask {
    pub const FULL: ModalityMask = ModalityMask([true; 4]);

    pub fn new(delta: [bool; 4]) -> Result<Self> {
        if delta.iter().any(|&d| d) {
            Ok(Self(delta))
        } else {
            Err(Error::AllModalitiesMissing)
        }
    }

    pub fn only(m: ModalityId) -> Self {
        let mut d = [false; 4];
        d[m.ordinal()] = true;
        Self(d)
    }

    /// Bit `i` set means modality with ordinal `i` is available.
    pub fn from_bits(bits: u8) -> Result<Self> {
        Self::new(std::array::from_fn(|i| bits & (1 << i) != 0))
    }

    pub fn bits(self) -> u8 {
        self.0.iter().enumerate().map(|(i, &d)| (d as u8) << i).sum()
    }

    pub fn delta(self) -> [bool; 4] {
        self.0
    }

    pub fn has(self, m: ModalityId) -> bool {
        self.0[m.ordinal()]
    }

    pub fn count(self) -> usize {
        self.0.iter().filter(|&&d| d).count()
    }

    pub fn is_full(self) -> bool {
        self.0 == [true; 4]
    }

    pub fn available(self) -> impl Iterator<Item = ModalityId> {
        ModalityId::ALL.into_iter().filter(move |&m| self.has(m))
    }

    /// All 15 non-empty masks in evaluation-table order: the four single
    /// modalities, then pairs, triples and the complete set, each group in
    /// lexicographic ordinal order.
    pub fn canonical() -> Vec<ModalityMask> {
        let mut masks: Vec<ModalityMask> = (1u8..16).map(|b| Self::from_bits(b).expect("non-empty")).collect();
        masks.sort_by_key(|m| {
            let idx: Vec<usize> = m.available().map(ModalityId::ordinal).collect();
            (idx.len(), idx)
        });
        masks
    }

    /// `"1010"`-style string in ordinal order (Flair, T1ce, T1, T2).
    pub fn code(self) -> String {
        self.0.iter().map(|&d| if d { '1' } else { '0' }).collect()
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.available().map(|m| m.to_string()).collect();
        f.write_str(&names.join("+"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_order_matches_table_layout() {
        let codes: Vec<String> = ModalityMask::canonical().into_iter().map(|m| m.code()).collect();
        assert_eq!(
            codes,
            [
                "1000", "0100", "0010", "0001", "1100", "1010", "1001", "0110", "0101", "0011", "1110", "1101", "1011",
                "0111", "1111"
            ]
        );
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(matches!(
            ModalityMask::new([false; 4]),
            Err(Error::AllModalitiesMissing)
        ));
        assert_eq!(
            ModalityMask::from_bits(0b0101).unwrap().delta(),
            [true, false, true, false]
        );
    }
}
