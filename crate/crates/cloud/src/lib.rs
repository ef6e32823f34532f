//! Cloud side: a TCP service that turns device uploads into classifier
//! parameters with the hosted hypernetwork, and the settings used by the
//! `cloud` command-line tool.

pub mod service;

use std::path::PathBuf;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use secdood_core::features::{split, synth_gaussian, synth_ood, FeatureDataset, FeatureError, SynthConfig};
use secdood_core::hypernet::HyperNetConfig;
use secdood_core::settings::Settings;
use secdood_train::hypertrain::TrainOptions;

pub use service::{handle_session, Limits, Model, RunningService, ServeMode, Service, ServiceStats, SessionReport};

/// The four files written by `cloud synth`.
#[derive(Debug, Clone)]
pub struct SynthSplits {
    pub train: FeatureDataset,
    pub val: FeatureDataset,
    pub calib: FeatureDataset,
    /// ID samples followed by as many OOD samples.
    pub test: FeatureDataset,
}

/// Train/val is an 80/20 split of `base`; calibration and the ID half of the
/// test set use a quarter of `per_class_count` at seeds `seed+1`, `seed+2`,
/// and the OOD half is drawn at `seed+3`.
pub fn synth_splits(base: &SynthConfig, ood_shift: f64) -> Result<SynthSplits, FeatureError> {
    let small = |seed| SynthConfig {
        per_class_count: (base.per_class_count / 4).max(1),
        seed,
        ..base.clone()
    };
    let (train, val) = split(&synth_gaussian(base)?, 0.8, base.seed)?;
    let calib = synth_gaussian(&small(base.seed + 1))?;
    let id_test = synth_gaussian(&small(base.seed + 2))?;
    let ood = synth_ood(base, ood_shift, id_test.len(), base.seed + 3)?;
    Ok(SynthSplits {
        train,
        val,
        calib,
        test: id_test.concat(&ood, "synth-test")?,
    })
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: String,
    pub checkpoint: PathBuf,
    pub mask_plan: PathBuf,
    pub mode: ServeMode,
    pub limits: Limits,
}

impl ServiceConfig {
    /// Keys: `listen`, `ckpt`, `mask`, `mode`, `max_sessions`,
    /// `session_timeout_secs`, `fraction_bits`, `insecure_test_keys`.
    pub fn from_settings(s: &Settings) -> Result<Self> {
        let path = |key: &str| -> Result<PathBuf> {
            s.get(key)
                .map(PathBuf::from)
                .with_context(|| format!("missing setting {key}"))
        };
        let defaults = Limits::default();
        let timeout: f64 = s.parse_or("session_timeout_secs", defaults.session_timeout.as_secs_f64())?;
        if !(timeout > 0.0 && timeout.is_finite()) {
            bail!("session_timeout_secs must be positive");
        }
        let max_sessions = s.parse_or("max_sessions", defaults.max_sessions)?;
        if max_sessions == 0 {
            bail!("max_sessions must be at least 1");
        }
        let limits = Limits {
            max_sessions,
            session_timeout: Duration::from_secs_f64(timeout),
            insecure_test_keys: s.parse_or("insecure_test_keys", false)?,
            ..defaults
        }
        .with_fraction_bits(s.parse_or("fraction_bits", defaults.codec.fraction_bits())?)?;
        Ok(Self {
            listen: s.get("listen").unwrap_or("127.0.0.1:7878").to_string(),
            checkpoint: path("ckpt")?,
            mask_plan: path("mask")?,
            mode: s
                .get("mode")
                .unwrap_or("encrypted-affine")
                .parse()
                .map_err(anyhow::Error::msg)?,
            limits,
        })
    }
}

/// Hypernetwork shape and optimizer settings for `cloud train`. Keys:
/// `layers`, `hidden_dim`, `batch_norm`, `lr`, `batch_size`, `epochs`,
/// `seed`, `mask_prob`, `mask_alpha`, `bn_momentum`.
pub fn train_settings(s: &Settings, channels: usize, classes: usize) -> Result<(HyperNetConfig, TrainOptions)> {
    let d = TrainOptions::default();
    let layers: usize = s.parse_or("layers", 1)?;
    let mut config = match layers {
        1 => HyperNetConfig::single(channels, classes),
        2 => HyperNetConfig::two_layer(channels, s.parse_or("hidden_dim", 64)?, classes),
        n => bail!("layers must be 1 or 2, got {n}"),
    };
    config.batch_norm = s.parse_or("batch_norm", true)?;
    let opts = TrainOptions {
        lr: s.parse_or("lr", d.lr)?,
        batch_size: s.parse_or("batch_size", d.batch_size)?,
        epochs: s.parse_or("epochs", d.epochs)?,
        seed: s.parse_or("seed", d.seed)?,
        mask_prob: s.parse_or("mask_prob", d.mask_prob)?,
        mask_alpha: s.parse_or("mask_alpha", d.mask_alpha)?,
        bn_momentum: s.parse_or("bn_momentum", d.bn_momentum)?,
    };
    opts.validate()?;
    Ok((config, opts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn service_settings_with_defaults() {
        let s = Settings::parse("ckpt = m.sdhn\nmask = p.sdmp\nmax_sessions = 3\n", "t").unwrap();
        let c = ServiceConfig::from_settings(&s).unwrap();
        assert_eq!(c.mode, ServeMode::EncryptedAffine);
        assert_eq!(c.limits.max_sessions, 3);
        assert_eq!(c.limits.codec.fraction_bits(), 24);
        assert!(!c.limits.insecure_test_keys);
        let s = Settings::parse("ckpt = m\n", "t").unwrap();
        assert!(ServiceConfig::from_settings(&s).is_err());
        let s = Settings::parse("ckpt = m\nmask = p\nmode = open\n", "t").unwrap();
        assert!(ServiceConfig::from_settings(&s).is_err());
    }

    #[test]
    fn train_settings_shapes() {
        let s = Settings::parse("layers = 2\nhidden_dim = 32\nepochs = 4\n", "t").unwrap();
        let (c, o) = train_settings(&s, 16, 8).unwrap();
        assert_eq!(c.layer_dims(), vec![(16, 32), (32, 16 * 8 + 8)]);
        assert_eq!(o.epochs, 4);
        assert_eq!(o.lr, 1e-4);
        assert!(train_settings(&Settings::parse("layers = 3\n", "t").unwrap(), 4, 2).is_err());
    }
}
