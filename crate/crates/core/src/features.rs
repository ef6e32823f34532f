//! Pooled feature datasets: in-memory model, the SDFT file format, synthetic
//! generators for desk-scale experiments, and channel pooling.
//!
//! SDFT layout (little-endian, no padding):
//!
//! ```text
//! "SDFT" | version u16 = 1 | num_classes u16 | channels u32 | sample_count u64
//! then per sample: label u16 (0xFFFF = OOD) | channels x f32
//! ```

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::binio::{Reader, Truncated};

pub const SDFT_MAGIC: &[u8; 4] = b"SDFT";
pub const SDFT_VERSION: u16 = 1;
pub const SDFT_HEADER_LEN: usize = 20;
pub const OOD_MARKER: u16 = 0xFFFF;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("non-finite raw entry at channel {channel}, t {t}, w {w}, h {h}")]
    NonFiniteRaw {
        channel: usize,
        t: usize,
        w: usize,
        h: usize,
    },
    #[error("non-finite feature value at index {index}")]
    NonFinite { index: usize },
    #[error("raw tensor axes must all be >= 1, got {0:?}")]
    EmptyAxis([usize; 4]),
    #[error("raw tensor has {actual} entries, dims {dims:?} need {expected}")]
    RawShape {
        dims: [usize; 4],
        expected: usize,
        actual: usize,
    },
    #[error("bad magic at byte offset 0")]
    BadMagic,
    #[error("unsupported SDFT version {version} at byte offset 4")]
    UnsupportedVersion { version: u16 },
    #[error(transparent)]
    Truncated(#[from] Truncated),
    #[error("label {label} >= num_classes {num_classes} at byte offset {offset}")]
    LabelOutOfRange {
        label: u16,
        num_classes: u16,
        offset: usize,
    },
    #[error("non-finite value at byte offset {offset}")]
    NonFiniteValue { offset: usize },
    #[error("{count} trailing bytes after last sample at byte offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("sample {index} has {actual} channels, dataset has {expected}")]
    ChannelMismatch {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A channel-pooled feature vector. Values are stored as `f32`, matching the
/// on-disk precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    values: Vec<f32>,
}

impl FeatureTensor {
    pub fn new(values: Vec<f32>) -> Result<Self, FeatureError> {
        if values.is_empty() {
            return Err(FeatureError::InvalidConfig(
                "feature tensor needs at least one channel".into(),
            ));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite { index });
        }
        Ok(Self { values })
    }

    pub fn channels(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    Class(u16),
    Ood,
}

impl Label {
    pub fn from_raw(raw: u16) -> Self {
        if raw == OOD_MARKER {
            Label::Ood
        } else {
            Label::Class(raw)
        }
    }

    pub fn raw(self) -> u16 {
        match self {
            Label::Class(c) => c,
            Label::Ood => OOD_MARKER,
        }
    }

    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c as usize),
            Label::Ood => None,
        }
    }

    pub fn is_ood(self) -> bool {
        matches!(self, Label::Ood)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub feature: FeatureTensor,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub name: String,
    num_classes: u16,
    channels: usize,
    samples: Vec<LabeledSample>,
}

impl FeatureDataset {
    pub fn new(
        name: impl Into<String>,
        num_classes: u16,
        channels: usize,
        samples: Vec<LabeledSample>,
    ) -> Result<Self, FeatureError> {
        if channels == 0 || channels > u32::MAX as usize {
            return Err(FeatureError::InvalidConfig(format!(
                "channel count {channels} out of range"
            )));
        }
        if num_classes == OOD_MARKER {
            return Err(FeatureError::InvalidConfig(
                "num_classes 0xFFFF collides with the OOD marker".into(),
            ));
        }
        for (index, s) in samples.iter().enumerate() {
            if s.feature.channels() != channels {
                return Err(FeatureError::ChannelMismatch {
                    index,
                    expected: channels,
                    actual: s.feature.channels(),
                });
            }
            if let Label::Class(label) = s.label {
                if label >= num_classes {
                    return Err(FeatureError::LabelOutOfRange {
                        label,
                        num_classes,
                        offset: SDFT_HEADER_LEN + index * sample_len(channels),
                    });
                }
            }
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            channels,
            samples,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes as usize
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Training sets need at least two classes and no OOD samples.
    pub fn check_trainable(&self) -> Result<(), FeatureError> {
        if self.num_classes < 2 {
            return Err(FeatureError::InvalidConfig(format!(
                "training set {:?} has {} classes, need >= 2",
                self.name, self.num_classes
            )));
        }
        if self.samples.iter().any(|s| s.label.is_ood()) {
            return Err(FeatureError::InvalidConfig(format!(
                "training set {:?} contains OOD-marked samples",
                self.name
            )));
        }
        Ok(())
    }

    /// Returns a copy restricted to the samples whose label satisfies `keep`.
    pub fn filter(&self, name: &str, keep: impl Fn(Label) -> bool) -> FeatureDataset {
        FeatureDataset {
            name: name.to_string(),
            num_classes: self.num_classes,
            channels: self.channels,
            samples: self
                .samples
                .iter()
                .filter(|s| keep(s.label))
                .cloned()
                .collect(),
        }
    }

    /// Concatenates two datasets with matching geometry.
    pub fn concat(&self, other: &FeatureDataset, name: &str) -> Result<FeatureDataset, FeatureError> {
        if other.channels != self.channels || other.num_classes != self.num_classes {
            return Err(FeatureError::InvalidConfig(format!(
                "cannot concatenate {}x{} with {}x{}",
                self.num_classes, self.channels, other.num_classes, other.channels
            )));
        }
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Ok(FeatureDataset {
            name: name.to_string(),
            num_classes: self.num_classes,
            channels: self.channels,
            samples,
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SDFT_HEADER_LEN + self.samples.len() * sample_len(self.channels));
        out.extend_from_slice(SDFT_MAGIC);
        out.extend_from_slice(&SDFT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.num_classes.to_le_bytes());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&s.label.raw().to_le_bytes());
            for v in s.feature.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses SDFT bytes. The format carries no name, so the caller supplies one.
    pub fn decode(bytes: &[u8], name: impl Into<String>) -> Result<Self, FeatureError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != SDFT_MAGIC {
            return Err(FeatureError::BadMagic);
        }
        let version = r.u16()?;
        if version != SDFT_VERSION {
            return Err(FeatureError::UnsupportedVersion { version });
        }
        let num_classes = r.u16()?;
        let channels = r.u32()? as usize;
        let count = r.u64()?;
        if channels == 0 {
            return Err(FeatureError::InvalidConfig("SDFT header declares zero channels".into()));
        }
        let per = sample_len(channels) as u64;
        let needed = count.checked_mul(per).unwrap_or(u64::MAX);
        if needed > r.remaining() as u64 {
            return Err(FeatureError::Truncated(Truncated {
                offset: r.offset(),
                needed: needed.min(usize::MAX as u64) as usize,
                available: r.remaining(),
            }));
        }
        let mut samples = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let offset = r.offset();
            let label = Label::from_raw(r.u16()?);
            if let Label::Class(l) = label {
                if l >= num_classes {
                    return Err(FeatureError::LabelOutOfRange {
                        label: l,
                        num_classes,
                        offset,
                    });
                }
            }
            let mut values = Vec::with_capacity(channels);
            for _ in 0..channels {
                let offset = r.offset();
                let v = r.f32()?;
                if !v.is_finite() {
                    return Err(FeatureError::NonFiniteValue { offset });
                }
                values.push(v);
            }
            samples.push(LabeledSample {
                feature: FeatureTensor { values },
                label,
            });
        }
        if r.remaining() != 0 {
            return Err(FeatureError::TrailingBytes {
                offset: r.offset(),
                count: r.remaining(),
            });
        }
        Ok(Self {
            name: name.into(),
            num_classes,
            channels,
            samples,
        })
    }
}

fn sample_len(channels: usize) -> usize {
    2 + 4 * channels
}

/// Reads an SDFT file; the dataset is named after the file stem.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<FeatureDataset, FeatureError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureDataset::decode(&bytes, name)
}

pub fn write_dataset(ds: &FeatureDataset, path: impl AsRef<Path>) -> Result<(), FeatureError> {
    let path = path.as_ref();
    fs::write(path, ds.encode()).map_err(|source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// A dense C x T x W x H activation tensor, row-major.
#[derive(Debug, Clone)]
pub struct RawTensor {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

/// Global average pooling over the T x W x H axes of each channel.
pub fn pool_raw(raw: &RawTensor) -> Result<FeatureTensor, FeatureError> {
    let dims = raw.dims;
    if dims.iter().any(|&d| d == 0) {
        return Err(FeatureError::EmptyAxis(dims));
    }
    let per_channel = dims[1] * dims[2] * dims[3];
    let expected = dims[0] * per_channel;
    if raw.data.len() != expected {
        return Err(FeatureError::RawShape {
            dims,
            expected,
            actual: raw.data.len(),
        });
    }
    let mut values = Vec::with_capacity(dims[0]);
    for (c, chunk) in raw.data.chunks_exact(per_channel).enumerate() {
        if let Some(i) = chunk.iter().position(|v| !v.is_finite()) {
            let h = i % dims[3];
            let w = (i / dims[3]) % dims[2];
            let t = i / (dims[2] * dims[3]);
            return Err(FeatureError::NonFiniteRaw { channel: c, t, w, h });
        }
        let mean = chunk.iter().sum::<f64>() / per_channel as f64;
        values.push(mean as f32);
    }
    FeatureTensor::new(values)
}

/// Parameters of the Gaussian class-conditional generator.
///
/// Class `c` has its mean at `mean_separation` on coordinate `c mod C` and
/// zero elsewhere; samples are interleaved so that sample `i` has class
/// `i mod K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub per_class_count: usize,
    pub mean_separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    fn validate(&self) -> Result<(), FeatureError> {
        if self.num_classes < 2 || self.num_classes >= OOD_MARKER as usize {
            return Err(FeatureError::InvalidConfig(format!(
                "num_classes {} must be in [2, 65535)",
                self.num_classes
            )));
        }
        if self.channels < 2 || self.channels > u32::MAX as usize {
            return Err(FeatureError::InvalidConfig(format!(
                "channels {} must be >= 2",
                self.channels
            )));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return Err(FeatureError::InvalidConfig(format!(
                "noise_sigma {} must be positive and finite",
                self.noise_sigma
            )));
        }
        if !(self.mean_separation >= 0.0 && self.mean_separation.is_finite()) {
            return Err(FeatureError::InvalidConfig(format!(
                "mean_separation {} must be non-negative and finite",
                self.mean_separation
            )));
        }
        Ok(())
    }

    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.channels];
        m[class % self.channels] = self.mean_separation;
        m
    }
}

fn sample_around(
    means: &[Vec<f64>],
    count: usize,
    sigma: f64,
    seed: u64,
    label: impl Fn(usize) -> Label,
) -> Result<Vec<LabeledSample>, FeatureError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).map_err(|e| FeatureError::InvalidConfig(e.to_string()))?;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mean = &means[i % means.len()];
        let values: Vec<f32> = mean
            .iter()
            .map(|&m| (m + normal.sample(&mut rng)) as f32)
            .collect();
        samples.push(LabeledSample {
            feature: FeatureTensor::new(values)?,
            label: label(i % means.len()),
        });
    }
    Ok(samples)
}

pub fn synth_gaussian(cfg: &SynthConfig) -> Result<FeatureDataset, FeatureError> {
    cfg.validate()?;
    let means: Vec<Vec<f64>> = (0..cfg.num_classes).map(|c| cfg.class_mean(c)).collect();
    let samples = sample_around(
        &means,
        cfg.num_classes * cfg.per_class_count,
        cfg.noise_sigma,
        cfg.seed,
        |c| Label::Class(c as u16),
    )?;
    FeatureDataset::new(
        format!("synth-id-s{}", cfg.seed),
        cfg.num_classes as u16,
        cfg.channels,
        samples,
    )
}

/// Mean of OOD component `j`, at distance >= `shift` from every ID class mean.
///
/// With spare coordinates (K < C) the component is rotated away from class
/// `j` towards the unused coordinate `K + (j mod (C - K))`: the mean becomes
/// `mu_j - shift*a*e_j + shift*sqrt(1-a^2)*e_n` with `a = min(1, sep/shift)`,
/// which removes as much of the class direction as the distance bound
/// allows. When every coordinate carries a class (K >= C) the component is
/// moved along `-1/sqrt(C)`, which is orthogonal to all class-mean
/// differences. A zero shift reproduces the ID means.
pub fn ood_mean(id: &SynthConfig, component: usize, shift: f64) -> Vec<f64> {
    let mut m = id.class_mean(component);
    if shift == 0.0 {
        return m;
    }
    let (k, c) = (id.num_classes, id.channels);
    if k < c {
        let a = (id.mean_separation / shift).min(1.0);
        let novel = k + component % (c - k);
        m[component % c] -= shift * a;
        m[novel] += shift * (1.0 - a * a).sqrt();
    } else {
        let step = shift / (c as f64).sqrt();
        m.iter_mut().for_each(|v| *v -= step);
    }
    m
}

pub fn synth_ood(
    id: &SynthConfig,
    shift_magnitude: f64,
    count: usize,
    seed: u64,
) -> Result<FeatureDataset, FeatureError> {
    id.validate()?;
    if !(shift_magnitude >= 0.0 && shift_magnitude.is_finite()) {
        return Err(FeatureError::InvalidConfig(format!(
            "shift_magnitude {shift_magnitude} must be non-negative and finite"
        )));
    }
    let means: Vec<Vec<f64>> = (0..id.num_classes)
        .map(|j| ood_mean(id, j, shift_magnitude))
        .collect();
    let samples = sample_around(&means, count, id.noise_sigma, seed, |_| Label::Ood)?;
    FeatureDataset::new(
        format!("synth-ood-s{seed}"),
        id.num_classes as u16,
        id.channels,
        samples,
    )
}

/// Seeded shuffle followed by a cut at `round(ratio * n)`.
pub fn split(
    ds: &FeatureDataset,
    ratio: f64,
    seed: u64,
) -> Result<(FeatureDataset, FeatureDataset), FeatureError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(FeatureError::InvalidConfig(format!(
            "split ratio {ratio} must be in (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (ratio * ds.len() as f64).round() as usize;
    let pick = |idx: &[usize], suffix: &str| FeatureDataset {
        name: format!("{}-{suffix}", ds.name),
        num_classes: ds.num_classes,
        channels: ds.channels,
        samples: idx.iter().map(|&i| ds.samples[i].clone()).collect(),
    };
    Ok((pick(&order[..cut], "train"), pick(&order[cut..], "val")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize, c: usize, n: usize, sep: f64, sigma: f64, seed: u64) -> SynthConfig {
        SynthConfig {
            num_classes: k,
            channels: c,
            per_class_count: n,
            mean_separation: sep,
            noise_sigma: sigma,
            seed,
        }
    }

    #[test]
    fn singleton_pooling_is_identity() {
        let raw = RawTensor {
            dims: [2, 1, 1, 1],
            data: vec![3.0, 5.0],
        };
        assert_eq!(pool_raw(&raw).unwrap().values(), &[3.0, 5.0]);
    }

    #[test]
    fn pooling_takes_arithmetic_mean() {
        let raw = RawTensor {
            dims: [1, 1, 2, 2],
            data: vec![1.0, 2.0, 3.0, 4.0],
        };
        assert_eq!(pool_raw(&raw).unwrap().values(), &[2.5]);
    }

    #[test]
    fn pooling_matches_scalar_loop() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dims = [3, 2, 3, 4];
        let data: Vec<f64> = (0..72).map(|_| rng.random_range(-5.0..5.0)).collect();
        let pooled = pool_raw(&RawTensor { dims, data: data.clone() }).unwrap();
        for c in 0..3 {
            let mut acc = 0.0;
            for t in 0..2 {
                for w in 0..3 {
                    for h in 0..4 {
                        acc += data[((c * 2 + t) * 3 + w) * 4 + h];
                    }
                }
            }
            assert!((pooled.values()[c] as f64 - acc / 24.0).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_reports_non_finite_position() {
        let mut data = vec![0.0; 2 * 2 * 2 * 2];
        data[8 + 5] = f64::NAN; // channel 1, t 1, w 0, h 1
        let err = pool_raw(&RawTensor { dims: [2, 2, 2, 2], data }).unwrap_err();
        match err {
            FeatureError::NonFiniteRaw { channel, t, w, h } => assert_eq!((channel, t, w, h), (1, 1, 0, 1)),
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(
            pool_raw(&RawTensor { dims: [1, 0, 1, 1], data: vec![] }),
            Err(FeatureError::EmptyAxis(_))
        ));
    }

    #[test]
    fn empty_dataset_is_header_only() {
        let ds = FeatureDataset::new("e", 2, 4, vec![]).unwrap();
        let bytes = ds.encode();
        assert_eq!(bytes.len(), SDFT_HEADER_LEN);
        assert_eq!(FeatureDataset::decode(&bytes, "e").unwrap(), ds);
    }

    #[test]
    fn single_sample_byte_layout() {
        let s = LabeledSample {
            feature: FeatureTensor::new(vec![1.5, -0.25]).unwrap(),
            label: Label::Class(0),
        };
        let ds = FeatureDataset::new("one", 2, 2, vec![s]).unwrap();
        let expected: Vec<u8> = [
            &b"SDFT"[..],
            &[0x01, 0x00],
            &[0x02, 0x00],
            &[0x02, 0x00, 0x00, 0x00],
            &[0x01, 0, 0, 0, 0, 0, 0, 0],
            &[0x00, 0x00],
            &[0x00, 0x00, 0xC0, 0x3F],
            &[0x00, 0x00, 0x80, 0xBE],
        ]
        .concat();
        assert_eq!(ds.encode(), expected);
    }

    #[test]
    fn decode_errors_carry_offsets() {
        let ds = synth_gaussian(&cfg(2, 2, 2, 1.0, 1.0, 1)).unwrap();
        let good = ds.encode();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(FeatureDataset::decode(&bad, "x"), Err(FeatureError::BadMagic)));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            FeatureDataset::decode(&bad, "x"),
            Err(FeatureError::UnsupportedVersion { version: 9 })
        ));

        let truncated = &good[..good.len() - 3];
        assert!(matches!(
            FeatureDataset::decode(truncated, "x"),
            Err(FeatureError::Truncated(Truncated { offset: 20, .. }))
        ));

        // second sample's label set to 7 with K = 2
        let mut bad = good.clone();
        let off = SDFT_HEADER_LEN + 10;
        bad[off] = 7;
        match FeatureDataset::decode(&bad, "x") {
            Err(FeatureError::LabelOutOfRange { label: 7, offset, .. }) => assert_eq!(offset, off),
            other => panic!("unexpected {other:?}"),
        }

        let mut bad = good.clone();
        bad[off + 2..off + 6].copy_from_slice(&f32::NAN.to_le_bytes());
        match FeatureDataset::decode(&bad, "x") {
            Err(FeatureError::NonFiniteValue { offset }) => assert_eq!(offset, off + 2),
            other => panic!("unexpected {other:?}"),
        }

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(FeatureDataset::decode(&bad, "x"), Err(FeatureError::TrailingBytes { .. })));
    }

    #[test]
    fn file_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = synth_gaussian(&cfg(3, 5, 34, 4.0, 1.0, 11)).unwrap();
        ds.name = "data".into();
        let path = dir.path().join("data.sdft");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.encode(), fs::read(&path).unwrap());
    }

    #[test]
    fn generator_is_deterministic() {
        let c = cfg(4, 6, 10, 5.0, 1.0, 42);
        assert_eq!(synth_gaussian(&c).unwrap().encode(), synth_gaussian(&c).unwrap().encode());
        assert_eq!(
            synth_ood(&c, 3.0, 17, 5).unwrap().encode(),
            synth_ood(&c, 3.0, 17, 5).unwrap().encode()
        );
    }

    #[test]
    fn vanishing_noise_gives_class_means() {
        let c = cfg(3, 4, 5, 7.0, 1e-60, 1);
        let ds = synth_gaussian(&c).unwrap();
        for s in ds.samples() {
            let mean = c.class_mean(s.label.class().unwrap());
            let want: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
            assert_eq!(s.feature.values(), want.as_slice());
        }
    }

    #[test]
    fn nearest_mean_separates_well_separated_classes() {
        let c = cfg(2, 4, 500, 10.0, 0.1, 3);
        let ds = synth_gaussian(&c).unwrap();
        let means: Vec<Vec<f64>> = (0..2).map(|k| c.class_mean(k)).collect();
        let correct = ds
            .samples()
            .iter()
            .filter(|s| {
                let x = s.feature.to_f64();
                let d: Vec<f64> = means
                    .iter()
                    .map(|m| m.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum())
                    .collect();
                let pred = if d[0] <= d[1] { 0 } else { 1 };
                Some(pred) == s.label.class()
            })
            .count();
        assert_eq!(correct, 1000);
    }

    #[test]
    fn zero_shift_reproduces_id_features() {
        let c = cfg(3, 5, 20, 6.0, 1.0, 9);
        let id = synth_gaussian(&c).unwrap();
        let ood = synth_ood(&c, 0.0, id.len(), c.seed).unwrap();
        for (a, b) in id.samples().iter().zip(ood.samples()) {
            assert_eq!(a.feature, b.feature);
            assert_eq!(b.label, Label::Ood);
        }
    }

    fn min_distance_to_id_means(c: &SynthConfig, ood: &FeatureDataset) -> f64 {
        let means: Vec<Vec<f64>> = (0..c.num_classes).map(|k| c.class_mean(k)).collect();
        ood.samples()
            .iter()
            .flat_map(|s| {
                let x = s.feature.to_f64();
                means
                    .iter()
                    .map(move |m| m.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                    .collect::<Vec<_>>()
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn ood_samples_keep_their_distance() {
        // spare coordinates available
        let c = cfg(8, 16, 10, 10.0, 0.1, 2);
        let ood = synth_ood(&c, 20.0, 2000, 8).unwrap();
        assert!(min_distance_to_id_means(&c, &ood) >= 19.0);
        // every coordinate used by a class mean
        let c = cfg(6, 4, 10, 10.0, 0.1, 2);
        let ood = synth_ood(&c, 20.0, 2000, 8).unwrap();
        assert!(min_distance_to_id_means(&c, &ood) >= 19.0);
    }

    #[test]
    fn ood_means_respect_bound_exactly() {
        for (k, ch) in [(8, 16), (3, 4), (5, 5), (9, 4)] {
            for &sep in &[0.0, 1.0, 10.0, 30.0] {
                for &shift in &[0.5, 5.0, 20.0, 100.0] {
                    let c = cfg(k, ch, 1, sep, 1.0, 0);
                    for j in 0..k {
                        let m = ood_mean(&c, j, shift);
                        for i in 0..k {
                            let d: f64 = c
                                .class_mean(i)
                                .iter()
                                .zip(&m)
                                .map(|(a, b)| (a - b).powi(2))
                                .sum::<f64>()
                                .sqrt();
                            assert!(d >= shift - 1e-9, "k={k} c={ch} sep={sep} shift={shift} j={j} i={i} d={d}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn split_is_disjoint_complete_and_seeded() {
        let ds = synth_gaussian(&cfg(2, 3, 5, 1.0, 1.0, 4)).unwrap();
        let (a, b) = split(&ds, 0.5, 3).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        let (a2, b2) = split(&ds, 0.5, 3).unwrap();
        assert_eq!((a.samples(), b.samples()), (a2.samples(), b2.samples()));

        let key = |s: &LabeledSample| (s.label, s.feature.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let mut union: Vec<_> = a.samples().iter().chain(b.samples()).map(key).collect();
        let mut orig: Vec<_> = ds.samples().iter().map(key).collect();
        union.sort();
        orig.sort();
        assert_eq!(union, orig);

        assert!(split(&ds, 0.0, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
    }

    #[test]
    fn invalid_synth_configs_rejected() {
        assert!(synth_gaussian(&cfg(1, 4, 2, 1.0, 1.0, 0)).is_err());
        assert!(synth_gaussian(&cfg(2, 1, 2, 1.0, 1.0, 0)).is_err());
        assert!(synth_gaussian(&cfg(2, 4, 2, 1.0, 0.0, 0)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sdft_roundtrip(
                k in 2u16..10,
                c in 1usize..6,
                rows in prop::collection::vec((0u16..12, prop::collection::vec(-1e6f32..1e6, 6)), 0..20),
            ) {
                let samples: Vec<LabeledSample> = rows
                    .into_iter()
                    .map(|(l, v)| LabeledSample {
                        feature: FeatureTensor::new(v[..c].to_vec()).unwrap(),
                        label: if l >= k { Label::Ood } else { Label::Class(l) },
                    })
                    .collect();
                let ds = FeatureDataset::new("p", k, c, samples).unwrap();
                let bytes = ds.encode();
                let back = FeatureDataset::decode(&bytes, "p").unwrap();
                prop_assert_eq!(&back, &ds);
                prop_assert_eq!(back.encode(), bytes);
            }

            #[test]
            fn pooling_is_linear(
                a in -3.0f64..3.0,
                b in -3.0f64..3.0,
                xs in prop::collection::vec(-1.0f64..1.0, 24),
                ys in prop::collection::vec(-1.0f64..1.0, 24),
            ) {
                let dims = [2, 3, 2, 2];
                let px = pool_raw(&RawTensor { dims, data: xs.clone() }).unwrap();
                let py = pool_raw(&RawTensor { dims, data: ys.clone() }).unwrap();
                let mixed: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| a * x + b * y).collect();
                let pm = pool_raw(&RawTensor { dims, data: mixed }).unwrap();
                for c in 0..2 {
                    let lin = a * px.values()[c] as f64 + b * py.values()[c] as f64;
                    prop_assert!((pm.values()[c] as f64 - lin).abs() < 1e-6);
                }
            }
        }
    }
}
