use ndarray::Array2;

use crate::error::{Error, Result};

/// Source label ids of CelebAMask-HQ, in id order.
pub const CELEBA_SOURCE: [&str; 19] = [
    "background", "skin", "l_brow", "r_brow", "l_eye", "r_eye", "eye_g", "l_ear", "r_ear", "ear_r",
    "nose", "mouth", "u_lip", "l_lip", "neck", "neck_l", "cloth", "hair", "hat",
];

/// Merged region names, in merged id order.
pub const CELEBA_REGIONS: [&str; 13] = [
    "background", "skin", "brows", "eyes", "glasses", "ears", "nose", "mouth", "lips", "hair", "hat",
    "neck", "cloth",
];

const CELEBA_MAP: [u8; 19] = [0, 1, 2, 2, 3, 3, 4, 5, 5, 5, 6, 7, 8, 8, 11, 11, 12, 9, 10];

/// Total map from source label ids onto merged region ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSchema {
    names: Vec<String>,
    mapping: Vec<u8>,
}

impl LabelSchema {
    /// The 19-to-13 merge: left/right pairs, earrings into ears, necklace into
    /// neck, both lips together.
    pub fn celeba() -> Self {
        Self {
            names: CELEBA_REGIONS.iter().map(|s| s.to_string()).collect(),
            mapping: CELEBA_MAP.to_vec(),
        }
    }

    /// Ids already merged: each maps to itself.
    pub fn identity(regions: usize) -> Self {
        Self {
            names: (0..regions).map(|i| format!("region{i}")).collect(),
            mapping: (0..regions).map(|i| i as u8).collect(),
        }
    }

    /// A custom table; merged ids must cover `0..=max` without gaps.
    pub fn custom(mapping: Vec<u8>) -> Result<Self> {
        let regions = mapping.iter().copied().max().map(|m| m as usize + 1).unwrap_or(0);
        for id in 0..regions {
            if !mapping.contains(&(id as u8)) {
                return Err(Error::Config(format!("data.label_map never produces merged id {id}")));
            }
        }
        let names = (0..regions)
            .map(|i| CELEBA_REGIONS.get(i).map(|s| s.to_string()).unwrap_or(format!("region{i}")))
            .collect();
        Ok(Self { names, mapping })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn regions(&self) -> usize {
        self.names.len()
    }

    pub fn source_classes(&self) -> usize {
        self.mapping.len()
    }

    pub fn map_id(&self, source: u8) -> Option<u8> {
        self.mapping.get(source as usize).copied()
    }

    pub fn merge(&self, raw: &Array2<u8>) -> Result<Array2<u8>> {
        let mut out = Array2::zeros(raw.dim());
        for ((row, col), &id) in raw.indexed_iter() {
            out[[row, col]] = self.map_id(id).ok_or(Error::LabelOutOfRange {
                label: id as u32,
                row,
                col,
                limit: self.mapping.len(),
            })?;
        }
        Ok(out)
    }
}
