//! Encrypt/mask channel partitions derived from importance scores.
//!
//! SDMP layout (little-endian): `"SDMP" | version u16 = 1 | channels u32 |
//! alpha f32 | ceil(alpha*C) x u32` encrypted-channel indices, ascending.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::binio::{Reader, Truncated};

pub const SDMP_MAGIC: &[u8; 4] = b"SDMP";
pub const SDMP_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("alpha {0} must be in (0, 1]")]
    AlphaOutOfRange(f64),
    #[error("score vector is empty")]
    NoChannels,
    #[error("non-finite importance score at channel {0}")]
    NonFiniteScore(usize),
    #[error("bad magic at byte offset 0")]
    BadMagic,
    #[error("unsupported SDMP version {0} at byte offset 4")]
    UnsupportedVersion(u16),
    #[error(transparent)]
    Truncated(#[from] Truncated),
    #[error("channel index {index} at byte offset {offset} is not ascending or >= {channels}")]
    BadIndex {
        index: u32,
        channels: u32,
        offset: usize,
    },
    #[error("{0} trailing bytes after encrypted-channel list")]
    TrailingBytes(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Number of encrypted channels for a given alpha: `ceil(alpha*C)`.
///
/// A relative slack of 1e-6 absorbs the rounding of alpha through `f32`
/// (0.3 is stored as 0.30000001), so `0.3 * 10` yields 3, not 4.
pub fn encrypted_count(alpha: f64, channels: usize) -> usize {
    let exact = alpha * channels as f64;
    let count = (exact - 1e-6 * exact.max(1.0)).ceil() as usize;
    count.clamp(1, channels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    channels: usize,
    alpha: f32,
    encrypted: Vec<usize>,
}

impl MaskPlan {
    /// Builds a plan from an explicit encrypted set, e.g. a random baseline mask.
    pub fn from_encrypted(channels: usize, alpha: f64, mut encrypted: Vec<usize>) -> Result<Self, MaskError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(MaskError::AlphaOutOfRange(alpha));
        }
        if channels == 0 {
            return Err(MaskError::NoChannels);
        }
        let alpha = alpha as f32;
        encrypted.sort_unstable();
        encrypted.dedup();
        if encrypted.len() != encrypted_count(alpha as f64, channels)
            || encrypted.last().is_some_and(|&c| c >= channels)
        {
            return Err(MaskError::BadIndex {
                index: encrypted.last().copied().unwrap_or(0) as u32,
                channels: channels as u32,
                offset: 0,
            });
        }
        Ok(Self {
            channels,
            alpha,
            encrypted,
        })
    }

    /// Every channel encrypted, nothing masked.
    pub fn full(channels: usize) -> Self {
        Self {
            channels,
            alpha: 1.0,
            encrypted: (0..channels).collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn alpha(&self) -> f32 {
        self.alpha
    }

    /// Encrypted channel indices, ascending.
    pub fn encrypted(&self) -> &[usize] {
        &self.encrypted
    }

    pub fn masked(&self) -> Vec<usize> {
        (0..self.channels).filter(|c| !self.is_encrypted(*c)).collect()
    }

    pub fn is_encrypted(&self, channel: usize) -> bool {
        self.encrypted.binary_search(&channel).is_ok()
    }

    /// Zeroes every masked channel of `values` in place.
    pub fn apply(&self, values: &mut [f64]) {
        for (c, v) in values.iter_mut().enumerate() {
            if !self.is_encrypted(c) {
                *v = 0.0;
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(14 + 4 * self.encrypted.len());
        out.extend_from_slice(SDMP_MAGIC);
        out.extend_from_slice(&SDMP_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&self.alpha.to_le_bytes());
        for &c in &self.encrypted {
            out.extend_from_slice(&(c as u32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, MaskError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != SDMP_MAGIC {
            return Err(MaskError::BadMagic);
        }
        let version = r.u16()?;
        if version != SDMP_VERSION {
            return Err(MaskError::UnsupportedVersion(version));
        }
        let channels = r.u32()?;
        let alpha = r.f32()?;
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(MaskError::AlphaOutOfRange(alpha as f64));
        }
        if channels == 0 {
            return Err(MaskError::NoChannels);
        }
        let count = encrypted_count(alpha as f64, channels as usize);
        let mut encrypted = Vec::with_capacity(count.min(r.remaining() / 4));
        for _ in 0..count {
            let offset = r.offset();
            let index = r.u32()?;
            if index >= channels || encrypted.last().is_some_and(|&p| p >= index as usize) {
                return Err(MaskError::BadIndex {
                    index,
                    channels,
                    offset,
                });
            }
            encrypted.push(index as usize);
        }
        if r.remaining() != 0 {
            return Err(MaskError::TrailingBytes(r.remaining()));
        }
        Ok(Self {
            channels: channels as usize,
            alpha,
            encrypted,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, MaskError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| MaskError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), MaskError> {
        let path = path.as_ref();
        fs::write(path, self.encode()).map_err(|source| MaskError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Selects the top `ceil(alpha*C)` channels by score for encryption; ties at
/// the cutoff go to the lower channel index.
pub fn build_mask_plan(scores: &[f64], alpha: f64) -> Result<MaskPlan, MaskError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(MaskError::AlphaOutOfRange(alpha));
    }
    if scores.is_empty() {
        return Err(MaskError::NoChannels);
    }
    if let Some(c) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MaskError::NonFiniteScore(c));
    }
    let alpha32 = alpha as f32;
    let keep = encrypted_count(alpha32 as f64, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut encrypted = order[..keep].to_vec();
    encrypted.sort_unstable();
    Ok(MaskPlan {
        channels: scores.len(),
        alpha: alpha32,
        encrypted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_top_half() {
        let plan = build_mask_plan(&[0.9, 0.1, 0.5, 0.3], 0.5).unwrap();
        assert_eq!(plan.encrypted(), &[0, 2]);
        assert_eq!(plan.masked(), vec![1, 3]);
    }

    #[test]
    fn full_alpha_encrypts_everything() {
        let plan = build_mask_plan(&[0.2, -1.0, 3.0], 1.0).unwrap();
        assert_eq!(plan.encrypted(), &[0, 1, 2]);
        assert!(plan.masked().is_empty());
    }

    #[test]
    fn ties_resolved_by_stable_sort_oracle() {
        let scores = [0.5, 0.7, 0.5, 0.5, 0.7, 0.1, 0.5, 0.2];
        for alpha in [0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 1.0] {
            let plan = build_mask_plan(&scores, alpha).unwrap();
            // oracle: stable sort of (index, score) by descending score
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            idx.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).unwrap());
            let k = (alpha * 8.0).ceil() as usize;
            let mut want = idx[..k].to_vec();
            want.sort();
            assert_eq!(plan.encrypted(), want.as_slice(), "alpha {alpha}");
        }
    }

    #[test]
    fn count_survives_f32_alpha() {
        assert_eq!(encrypted_count(0.3f32 as f64, 10), 3);
        assert_eq!(encrypted_count(0.7, 10), 7);
        assert_eq!(encrypted_count(0.5, 16), 8);
        assert_eq!(encrypted_count(0.25, 5), 2);
        assert_eq!(encrypted_count(0.01, 4), 1);
    }

    #[test]
    fn rejects_bad_alpha() {
        assert!(matches!(build_mask_plan(&[1.0], 0.0), Err(MaskError::AlphaOutOfRange(_))));
        assert!(matches!(build_mask_plan(&[1.0], 1.5), Err(MaskError::AlphaOutOfRange(_))));
    }

    #[test]
    fn sdmp_layout_and_roundtrip() {
        let plan = build_mask_plan(&[0.9, 0.1, 0.5, 0.3], 0.5).unwrap();
        let bytes = plan.encode();
        let mut want = b"SDMP".to_vec();
        want.extend_from_slice(&1u16.to_le_bytes());
        want.extend_from_slice(&4u32.to_le_bytes());
        want.extend_from_slice(&0.5f32.to_le_bytes());
        want.extend_from_slice(&0u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(MaskPlan::decode(&bytes).unwrap(), plan);

        let mut bad = bytes.clone();
        bad[14..18].copy_from_slice(&3u32.to_le_bytes());
        bad[18..22].copy_from_slice(&1u32.to_le_bytes());
        assert!(matches!(MaskPlan::decode(&bad), Err(MaskError::BadIndex { offset: 18, .. })));
        assert!(matches!(MaskPlan::decode(&bytes[..20]), Err(MaskError::Truncated(_))));
    }

    #[test]
    fn explicit_plan_validates_count() {
        assert!(MaskPlan::from_encrypted(4, 0.5, vec![3, 1]).is_ok());
        assert!(MaskPlan::from_encrypted(4, 0.5, vec![1]).is_err());
        assert!(MaskPlan::from_encrypted(4, 0.5, vec![1, 4]).is_err());
    }

    #[test]
    fn huge_declared_count_is_truncated_not_allocated() {
        let mut bytes = b"SDMP".to_vec();
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        assert!(matches!(MaskPlan::decode(&bytes), Err(MaskError::Truncated(_))));
    }
}
