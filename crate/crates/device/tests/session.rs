use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use secdood_cloud::{Limits, Model, RunningService, ServeMode, Service};
use secdood_core::crypto::{keygen, FixedPointCodec, KeyGenOptions};
use secdood_core::features::{synth_gaussian, synth_ood, FeatureDataset, SynthConfig};
use secdood_core::hypernet::{HyperNetConfig, HyperNetParams};
use secdood_core::mask::MaskPlan;
use secdood_core::scores::ScoreMethod;
use secdood_device::{
    exchange, exchange_plaintext, offline_eval, run_detection, session_profile, DeviceConfig, DeviceError,
    RetryPolicy, ScoringOptions, SessionSpec,
};

const K: usize = 3;
const C: usize = 8;

/// Keeps a copy of every byte the device writes.
struct Recording<S> {
    inner: S,
    sent: Vec<u8>,
}

impl<S: Read> Read for Recording<S> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.inner.read(buf)
    }
}

impl<S: Write> Write for Recording<S> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.sent.extend_from_slice(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn synth(seed: u64, per_class: usize) -> SynthConfig {
    SynthConfig {
        num_classes: K,
        channels: C,
        per_class_count: per_class,
        mean_separation: 6.0,
        noise_sigma: 1.0,
        seed,
    }
}

fn data() -> (FeatureDataset, FeatureDataset) {
    let calib = synth_gaussian(&synth(1, 20)).unwrap();
    let id = synth_gaussian(&synth(2, 10)).unwrap();
    let test = id.concat(&synth_ood(&synth(2, 10), 6.0, 30, 3).unwrap(), "test").unwrap();
    (calib, test)
}

fn plan() -> MaskPlan {
    MaskPlan::from_encrypted(C, 0.5, vec![1, 2, 5, 7]).unwrap()
}

fn serve(mode: ServeMode, limits: Limits) -> RunningService {
    let config = match mode {
        ServeMode::EncryptedAffine => HyperNetConfig::single(C, K),
        ServeMode::TrustedPlaintext => HyperNetConfig::two_layer(C, 5, K),
    };
    let params = HyperNetParams::init(config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let model = Model::new(params, plan(), mode).unwrap();
    let limits = Limits {
        insecure_test_keys: true,
        ..limits
    };
    Service::bind("127.0.0.1:0", model, limits).unwrap().spawn().unwrap()
}

fn device(svc: &RunningService) -> DeviceConfig {
    let mut cfg = DeviceConfig::new(svc.addr.to_string(), plan());
    cfg.key_bits = 512;
    cfg.insecure_test_keys = true;
    cfg.io_timeout = Duration::from_secs(10);
    cfg.scoring = ScoringOptions {
        methods: vec![ScoreMethod::Energy, ScoreMethod::Msp, ScoreMethod::MaxLogit],
        ..ScoringOptions::default()
    };
    cfg
}

fn encodings(x: f64, fraction_bits: u32) -> Vec<Vec<u8>> {
    let fixed = (x * 2f64.powi(fraction_bits as i32)).round() as i64;
    let mut out = vec![
        (x as f32).to_le_bytes().to_vec(),
        (x as f32).to_be_bytes().to_vec(),
        x.to_le_bytes().to_vec(),
        x.to_be_bytes().to_vec(),
        fixed.to_le_bytes().to_vec(),
        fixed.to_be_bytes().to_vec(),
    ];
    // minimal big-endian magnitude, as a bigint would be serialized
    let be = fixed.unsigned_abs().to_be_bytes();
    let first = be.iter().position(|b| *b != 0).unwrap_or(7);
    out.push(be[first..].to_vec());
    out
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle)
}

fn unmasked_profile(test: &FeatureDataset) -> Vec<f64> {
    session_profile(test, &MaskPlan::full(C)).unwrap()
}

#[test]
fn masked_channels_never_leave_the_device() {
    let (_, test) = data();
    let raw = unmasked_profile(&test);
    let plan = plan();
    let profile = session_profile(&test, &plan).unwrap();
    for c in plan.masked() {
        assert_eq!(profile[c], 0.0);
        assert!(raw[c].abs() > 1e-3, "channel {c} should carry signal for the scan to mean anything");
    }
    let spec = SessionSpec {
        client_id: 3,
        session: 77,
        plan: &plan,
        profile: &profile,
        classes: K,
        check_plan: true,
    };

    let enc = serve(ServeMode::EncryptedAffine, Limits::default());
    let keys = keygen(KeyGenOptions::insecure_test(11)).unwrap();
    let codec = FixedPointCodec::default();
    let mut rec = Recording {
        inner: TcpStream::connect(enc.addr).unwrap(),
        sent: Vec::new(),
    };
    exchange(&mut rec, &spec, &keys, &codec).unwrap();
    let encrypted_bytes = rec.sent;
    enc.stop().unwrap();

    let plain = serve(ServeMode::TrustedPlaintext, Limits::default());
    let mut rec = Recording {
        inner: TcpStream::connect(plain.addr).unwrap(),
        sent: Vec::new(),
    };
    exchange_plaintext(&mut rec, &spec).unwrap();
    let plain_bytes = rec.sent;
    plain.stop().unwrap();

    for c in plan.masked() {
        for enc in encodings(raw[c], codec.fraction_bits()) {
            assert!(!contains(&encrypted_bytes, &enc), "channel {c} leaked in the encrypted session");
            assert!(!contains(&plain_bytes, &enc), "channel {c} leaked in the plaintext session");
        }
    }
    // sanity: the scan does find encrypted channels in the plaintext upload
    for &c in plan.encrypted() {
        assert!(contains(&plain_bytes, &(raw[c] as f32).to_le_bytes()));
    }
}

#[test]
fn online_and_offline_reports_agree() {
    let (calib, test) = data();
    let svc = serve(ServeMode::EncryptedAffine, Limits::default());
    let cfg = device(&svc);
    let online = run_detection(&cfg, &calib, &test).unwrap();
    svc.stop().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("theta.sdtd");
    online.theta.write(&path).unwrap();
    let offline = offline_eval(&path, &calib, &test, &cfg.scoring).unwrap();
    assert_eq!(offline.report, online.report);
    assert_eq!(offline.report.to_csv(), online.report.to_csv());
    assert_eq!(offline.records, online.records);
    assert_eq!((online.report.n_id, online.report.n_ood), (30, 30));
}

#[test]
fn encrypted_and_trusted_runs_agree_on_a_linear_model() {
    let (calib, test) = data();
    let params = HyperNetParams::init(HyperNetConfig::single(C, K), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut outs = Vec::new();
    for (mode, plaintext) in [(ServeMode::EncryptedAffine, false), (ServeMode::TrustedPlaintext, true)] {
        let model = Model::new(params.clone(), plan(), mode).unwrap();
        let limits = Limits {
            insecure_test_keys: true,
            ..Limits::default()
        };
        let svc = Service::bind("127.0.0.1:0", model, limits).unwrap().spawn().unwrap();
        let mut cfg = device(&svc);
        cfg.plaintext = plaintext;
        outs.push(run_detection(&cfg, &calib, &test).unwrap().theta);
        svc.stop().unwrap();
    }
    for (a, b) in outs[0].flat().iter().zip(outs[1].flat()) {
        assert!((a - b).abs() <= 1e-3, "{a} vs {b}");
    }
}

#[test]
fn fraction_mismatch_is_caught_by_the_sentinel() {
    let (calib, test) = data();
    let limits = Limits::default().with_fraction_bits(20).unwrap();
    let svc = serve(ServeMode::EncryptedAffine, limits);
    let r = run_detection(&device(&svc), &calib, &test);
    assert!(matches!(r, Err(DeviceError::SentinelMismatch { .. })), "{r:?}");
    assert_eq!(r.unwrap_err().exit_code(), 3);
    svc.stop().unwrap();
}

#[test]
fn alpha_check_refuses_a_different_plan() {
    let (calib, test) = data();
    let svc = serve(ServeMode::EncryptedAffine, Limits::default());
    let mut cfg = device(&svc);
    cfg.alpha_check = true;
    run_detection(&cfg, &calib, &test).unwrap();
    cfg.plan = MaskPlan::from_encrypted(C, 0.5, vec![0, 2, 5, 7]).unwrap();
    let r = run_detection(&cfg, &calib, &test);
    assert!(matches!(r, Err(DeviceError::PlanMismatch { .. })), "{r:?}");
    svc.stop().unwrap();
}

#[test]
fn unreachable_server_is_a_protocol_exit() {
    let (calib, test) = data();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let mut cfg = DeviceConfig::new(port.to_string(), plan());
    cfg.key_bits = 512;
    cfg.insecure_test_keys = true;
    cfg.retry = RetryPolicy {
        attempts: 2,
        initial_backoff: Duration::from_millis(10),
    };
    let r = run_detection(&cfg, &calib, &test);
    assert!(matches!(r, Err(DeviceError::Unreachable { attempts: 2, .. })), "{r:?}");
    assert_eq!(r.unwrap_err().exit_code(), 2);
}
