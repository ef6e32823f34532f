//! Detection: obtain `theta_d`, fit ID statistics on the calibration split,
//! score the test set, threshold and report. Online and offline runs share
//! [`evaluate_theta`].

use std::path::Path;
use std::time::Duration;

use log::info;
use rand::Rng;

use secdood_core::crypto::{keygen, FixedPointCodec, KeyGenOptions, DEFAULT_RANGE_BITS};
use secdood_core::features::FeatureDataset;
use secdood_core::hypernet::{DeviceProfile, GeneratedParams};
use secdood_core::mask::MaskPlan;
use secdood_core::metrics::EvalReport;
use secdood_core::scores::{calibrate_threshold, decide, fit_statistics, ScoreMethod, ScoreParams, ScoreRecord};

use crate::client::{connect, exchange, exchange_plaintext, RetryPolicy, SessionSpec};
use crate::DeviceError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSource {
    /// Threshold at this TPR on the calibration split's ID scores.
    Calibrate { tpr: f64 },
    Explicit(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringOptions {
    pub methods: Vec<ScoreMethod>,
    pub params: ScoreParams,
    pub threshold: ThresholdSource,
    /// TPR at which the report's FPR is measured.
    pub report_tpr: f64,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        Self {
            methods: vec![ScoreMethod::Energy, ScoreMethod::Msp, ScoreMethod::Knn],
            params: ScoreParams::default(),
            threshold: ThresholdSource::Calibrate { tpr: 0.95 },
            report_tpr: 0.95,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DeviceConfig {
    pub server: String,
    pub plan: MaskPlan,
    pub key_bits: usize,
    /// Allows 512-bit keys; tests only.
    pub insecure_test_keys: bool,
    pub fraction_bits: u32,
    pub scoring: ScoringOptions,
    pub client_id: Option<u64>,
    /// Use the trusted-plaintext exchange instead of encryption.
    pub plaintext: bool,
    /// Request the cloud's mask plan and require it to equal ours.
    pub alpha_check: bool,
    pub retry: RetryPolicy,
    pub io_timeout: Duration,
}

impl DeviceConfig {
    pub fn new(server: impl Into<String>, plan: MaskPlan) -> Self {
        Self {
            server: server.into(),
            plan,
            key_bits: 2048,
            insecure_test_keys: false,
            fraction_bits: secdood_core::crypto::DEFAULT_FRACTION_BITS,
            scoring: ScoringOptions::default(),
            client_id: None,
            plaintext: false,
            alpha_check: false,
            retry: RetryPolicy::default(),
            io_timeout: Duration::from_secs(60),
        }
    }

    pub fn codec(&self) -> Result<FixedPointCodec, DeviceError> {
        Ok(FixedPointCodec::new(self.fraction_bits, (1u64 << DEFAULT_RANGE_BITS) as f64)?)
    }
}

#[derive(Debug, Clone)]
pub struct DetectionOutput {
    pub theta: GeneratedParams,
    pub report: EvalReport,
    /// One record per test sample and method, in sample order per method.
    pub records: Vec<ScoreRecord>,
}

fn features(ds: &FeatureDataset) -> Vec<Vec<f64>> {
    ds.samples().iter().map(|s| s.feature.to_f64()).collect()
}

fn check_geometry(theta: &GeneratedParams, calib: &FeatureDataset, test: &FeatureDataset) -> Result<(), DeviceError> {
    for ds in [calib, test] {
        if ds.channels() != theta.features() || ds.num_classes() != theta.classes() {
            return Err(DeviceError::Data(format!(
                "{} is {}x{}, classifier is {}x{}",
                ds.name,
                ds.num_classes(),
                ds.channels(),
                theta.classes(),
                theta.features()
            )));
        }
    }
    if test.is_empty() {
        return Err(DeviceError::Data("test set is empty".into()));
    }
    Ok(())
}

/// Scores `test` under `theta`; deterministic in its inputs.
pub fn evaluate_theta(
    theta: &GeneratedParams,
    calib: &FeatureDataset,
    test: &FeatureDataset,
    opts: &ScoringOptions,
) -> Result<DetectionOutput, DeviceError> {
    check_geometry(theta, calib, test)?;
    let stats = fit_statistics(calib, theta, opts.params)?;
    let calib_x: Vec<Vec<f64>> = calib
        .samples()
        .iter()
        .filter(|s| s.label.class().is_some())
        .map(|s| s.feature.to_f64())
        .collect();
    let test_x = features(test);
    let is_ood: Vec<bool> = test.samples().iter().map(|s| s.label.is_ood()).collect();
    let mut per_method = Vec::with_capacity(opts.methods.len());
    let mut taus = Vec::with_capacity(opts.methods.len());
    let mut records = Vec::with_capacity(opts.methods.len() * test_x.len());
    for &method in &opts.methods {
        let scores = stats.score_all(method, &test_x)?;
        let tau = match opts.threshold {
            ThresholdSource::Explicit(t) => t,
            ThresholdSource::Calibrate { tpr } => calibrate_threshold(&stats.score_all(method, &calib_x)?, tpr)?,
        };
        records.extend(scores.iter().enumerate().map(|(i, &score)| ScoreRecord {
            sample_id: i,
            method,
            score,
            decision: decide(score, tau),
        }));
        let (ood, id): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
            scores.iter().copied().enumerate().partition(|(i, _)| is_ood[*i]);
        per_method.push((method, id.into_iter().map(|p| p.1).collect(), ood.into_iter().map(|p| p.1).collect()));
        taus.push(tau);
    }
    let source = match opts.threshold {
        ThresholdSource::Calibrate { tpr } => format!("calibrated@{tpr}"),
        ThresholdSource::Explicit(t) => format!("explicit:{t}"),
    };
    let config = vec![
        ("features".into(), theta.features().to_string()),
        ("classes".into(), theta.classes().to_string()),
        ("calibration_samples".into(), calib_x.len().to_string()),
        ("threshold_source".into(), source),
    ];
    let mut report = EvalReport::compute(&per_method, opts.report_tpr, config);
    report.n_id = is_ood.iter().filter(|o| !**o).count();
    report.n_ood = is_ood.len() - report.n_id;
    for (m, tau) in report.methods.iter_mut().zip(taus) {
        m.threshold = Some(tau);
    }
    Ok(DetectionOutput {
        theta: theta.clone(),
        report,
        records,
    })
}

/// Batch-mean profile of the session's test features, masked channels zeroed.
pub fn session_profile(test: &FeatureDataset, plan: &MaskPlan) -> Result<Vec<f64>, DeviceError> {
    if test.channels() != plan.channels() {
        return Err(DeviceError::Data(format!(
            "mask plan covers {} channels, features have {}",
            plan.channels(),
            test.channels()
        )));
    }
    let xs = features(test);
    Ok(DeviceProfile::from_batch(xs.iter().map(Vec::as_slice), Some(plan), plan.channels())?
        .values()
        .to_vec())
}

/// Fetches `theta_d` for the session data from the cloud.
pub fn fetch_theta(config: &DeviceConfig, test: &FeatureDataset) -> Result<GeneratedParams, DeviceError> {
    let profile = session_profile(test, &config.plan)?;
    let codec = config.codec()?;
    let mut rng = rand::rng();
    let spec = SessionSpec {
        client_id: config.client_id.unwrap_or_else(|| rng.random()),
        session: rng.random(),
        plan: &config.plan,
        profile: &profile,
        classes: test.num_classes(),
        check_plan: config.alpha_check,
    };
    let keys = if config.plaintext {
        None
    } else {
        Some(keygen(KeyGenOptions {
            bits: config.key_bits,
            insecure_test: config.insecure_test_keys,
            seed: None,
        })?)
    };
    config.retry.run(|attempt| {
        info!("connecting to {} (attempt {attempt})", config.server);
        let mut stream = connect(&config.server, config.io_timeout)?;
        match &keys {
            Some(k) => exchange(&mut stream, &spec, k, &codec),
            None => exchange_plaintext(&mut stream, &spec),
        }
    })
}

/// Online detection: one session with the cloud, then local scoring.
pub fn run_detection(
    config: &DeviceConfig,
    calib: &FeatureDataset,
    test: &FeatureDataset,
) -> Result<DetectionOutput, DeviceError> {
    if calib.channels() != config.plan.channels() {
        return Err(DeviceError::Data(format!(
            "calibration features have {} channels, mask plan {}",
            calib.channels(),
            config.plan.channels()
        )));
    }
    // score with the precision a saved theta_d has, so offline runs reproduce this one
    let theta = fetch_theta(config, test)?.quantized();
    evaluate_theta(&theta, calib, test, &config.scoring)
}

/// Air-gapped evaluation from a saved `theta_d` file.
pub fn offline_eval(
    theta_path: &Path,
    calib: &FeatureDataset,
    test: &FeatureDataset,
    opts: &ScoringOptions,
) -> Result<DetectionOutput, DeviceError> {
    let theta = GeneratedParams::read(theta_path)?;
    evaluate_theta(&theta, calib, test, opts)
}
