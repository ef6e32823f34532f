use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use secdood_core::crypto::{keygen, KeyGenOptions};
use secdood_core::features::read_dataset;
use secdood_core::mask::MaskPlan;
use secdood_core::metrics::{bench_crypto, bench_csv};
use secdood_core::scores::{write_score_csv, ScoreMethod};
use secdood_core::settings::Settings;
use secdood_device::{offline_eval, run_detection, DetectionOutput, DeviceConfig, DeviceError, ScoringOptions, ThresholdSource};

#[derive(Parser)]
#[command(name = "device", version, about = "On-device OOD detection client")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fetch a classifier from the cloud and score the test set.
    Run(RunArgs),
    /// Score with a saved classifier, without any network access.
    EvalOffline(OfflineArgs),
    /// Time encryption and decryption for several encrypted fractions.
    BenchCrypto(BenchArgs),
}

#[derive(Args)]
struct ScoringArgs {
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Comma-separated: msp, maxlogit, energy, gen, mahalanobis, knn, react, ash, vim.
    #[arg(long)]
    methods: Option<String>,
    /// Explicit threshold instead of calibrating on the calibration split.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    tpr: Option<f64>,
    /// Metrics report (CSV).
    #[arg(long)]
    out: PathBuf,
    /// Per-sample scores and decisions (CSV).
    #[arg(long)]
    scores: Option<PathBuf>,
    /// key=value file; SECDOOD_* variables override it, flags override both.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long)]
    server: Option<String>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    key_bits: Option<usize>,
    #[arg(long)]
    fraction_bits: Option<u32>,
    /// Ask the cloud for its mask plan and abort unless it equals ours.
    #[arg(long)]
    alpha_check: bool,
    /// Trusted-plaintext exchange (the cloud sees the profile).
    #[arg(long)]
    plaintext: bool,
    /// Accept 512-bit keys (tests only).
    #[arg(long)]
    insecure_test_keys: bool,
    /// Save the received classifier here.
    #[arg(long)]
    theta_out: Option<PathBuf>,
}

#[derive(Args)]
struct OfflineArgs {
    #[command(flatten)]
    scoring: ScoringArgs,
    #[arg(long)]
    theta: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "0.25,0.5,0.75,1.0")]
    fractions: String,
    #[arg(long, default_value_t = 2048)]
    key_bits: usize,
    #[arg(long, default_value_t = 128)]
    channels: usize,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    insecure_test_keys: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn data_err(e: impl std::fmt::Display) -> DeviceError {
    DeviceError::Data(e.to_string())
}

fn settings(a: &ScoringArgs) -> Result<Settings, DeviceError> {
    let mut s = Settings::load(a.config.as_deref()).map_err(data_err)?;
    if let Some(m) = &a.methods {
        s.set("methods", m);
    }
    if let Some(t) = a.tau {
        s.set("tau", t);
    }
    if let Some(t) = a.tpr {
        s.set("tpr", t);
    }
    Ok(s)
}

fn scoring(s: &Settings) -> Result<ScoringOptions, DeviceError> {
    let methods = ScoreMethod::parse_list(s.get("methods").unwrap_or("energy,msp,knn"))?;
    let tpr: f64 = s.parse_or("tpr", 0.95).map_err(data_err)?;
    let threshold = match s.parse_opt::<f64>("tau").map_err(data_err)? {
        Some(t) => ThresholdSource::Explicit(t),
        None => ThresholdSource::Calibrate { tpr },
    };
    Ok(ScoringOptions {
        methods,
        threshold,
        report_tpr: tpr,
        ..ScoringOptions::default()
    })
}

fn write_outputs(out: &DetectionOutput, a: &ScoringArgs) -> Result<(), DeviceError> {
    fs::write(&a.out, out.report.to_csv())?;
    if let Some(path) = &a.scores {
        let mut buf = Vec::new();
        write_score_csv(&mut buf, &out.records)?;
        fs::write(path, buf)?;
    }
    print!("{}", out.report.to_text());
    Ok(())
}

fn run(a: RunArgs) -> Result<(), DeviceError> {
    let mut s = settings(&a.scoring)?;
    if let Some(v) = &a.server {
        s.set("server", v);
    }
    if let Some(v) = &a.mask {
        s.set("mask", v.display());
    }
    if let Some(v) = a.key_bits {
        s.set("key_bits", v);
    }
    if let Some(v) = a.fraction_bits {
        s.set("fraction_bits", v);
    }
    let server = s.get("server").ok_or_else(|| data_err("missing --server"))?.to_string();
    let mask = s.get("mask").ok_or_else(|| data_err("missing --mask"))?;
    let mut cfg = DeviceConfig::new(server, MaskPlan::read(Path::new(mask))?);
    cfg.key_bits = s.parse_or("key_bits", cfg.key_bits).map_err(data_err)?;
    cfg.fraction_bits = s.parse_or("fraction_bits", cfg.fraction_bits).map_err(data_err)?;
    cfg.scoring = scoring(&s)?;
    cfg.alpha_check = a.alpha_check;
    cfg.plaintext = a.plaintext;
    cfg.insecure_test_keys = a.insecure_test_keys;
    let calib = read_dataset(&a.scoring.calib)?;
    let test = read_dataset(&a.scoring.test)?;
    let out = run_detection(&cfg, &calib, &test)?;
    if let Some(path) = &a.theta_out {
        out.theta.write(path)?;
    }
    write_outputs(&out, &a.scoring)
}

fn eval_offline(a: OfflineArgs) -> Result<(), DeviceError> {
    let s = settings(&a.scoring)?;
    let calib = read_dataset(&a.scoring.calib)?;
    let test = read_dataset(&a.scoring.test)?;
    let out = offline_eval(&a.theta, &calib, &test, &scoring(&s)?)?;
    write_outputs(&out, &a.scoring)
}

fn bench(a: BenchArgs) -> Result<(), DeviceError> {
    let fractions = a
        .fractions
        .split(',')
        .map(|f| f.trim().parse::<f64>().map_err(data_err))
        .collect::<Result<Vec<_>, _>>()?;
    let kp = keygen(KeyGenOptions {
        bits: a.key_bits,
        insecure_test: a.insecure_test_keys,
        seed: None,
    })?;
    let rows = bench_crypto(&kp, &fractions, a.channels, a.trials, a.seed)?;
    let csv = bench_csv(&rows);
    match &a.out {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match Cli::parse().command {
        Command::Run(a) => run(a),
        Command::EvalOffline(a) => eval_offline(a),
        Command::BenchCrypto(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
