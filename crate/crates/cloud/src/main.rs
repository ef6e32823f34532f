use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use secdood_cloud::{synth_splits, train_settings, Model, Service, ServiceConfig};
use secdood_core::features::{read_dataset, write_dataset, SynthConfig};
use secdood_core::mask::build_mask_plan;
use secdood_core::settings::Settings;
use secdood_train::hypertrain::train_hypernet;
use secdood_train::shapley::{compute_importance, ImportanceConfig};

#[derive(Parser)]
#[command(name = "cloud", version, about = "Hypernetwork training, channel importance and the parameter service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a hypernetwork checkpoint on ID features.
    Train(TrainArgs),
    /// Rank channels by Shapley importance and write a mask plan.
    Importance(ImportanceArgs),
    /// Serve parameter-generation sessions.
    Serve(ServeArgs),
    /// Write synthetic Gaussian feature files for experiments.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// key=value file; SECDOOD_* variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ImportanceArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 2000)]
    permutations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write `channel,score` rows here.
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// encrypted-affine or trusted-plaintext.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    max_sessions: Option<usize>,
    #[arg(long)]
    timeout_secs: Option<f64>,
    /// Accept 512-bit device keys (tests only).
    #[arg(long)]
    insecure_test_keys: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 400)]
    per_class: usize,
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Distance of the OOD component means from the ID means.
    #[arg(long, default_value_t = 10.0)]
    ood_shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn train(a: TrainArgs) -> Result<()> {
    let tr = read_dataset(&a.train)?;
    let va = read_dataset(&a.val)?;
    let mut s = Settings::load(a.config.as_deref())?;
    if let Some(e) = a.epochs {
        s.set("epochs", e);
    }
    if let Some(seed) = a.seed {
        s.set("seed", seed);
    }
    let (config, opts) = train_settings(&s, tr.channels(), tr.num_classes())?;
    info!("training {config:?} with {opts:?}");
    let out = train_hypernet(config, &tr, &va, &opts)?;
    out.params.write(&a.out)?;
    let best = &out.history[out.best_epoch];
    println!(
        "best epoch {} val_loss {:.5} val_accuracy {:.4} -> {}",
        out.best_epoch,
        best.val_loss,
        best.val_accuracy,
        a.out.display()
    );
    Ok(())
}

fn importance(a: ImportanceArgs) -> Result<()> {
    let tr = read_dataset(&a.train)?;
    let cfg = ImportanceConfig {
        permutations: a.permutations,
        seed: a.seed,
        ..ImportanceConfig::default()
    };
    let scores = compute_importance(&tr, &cfg)?;
    let plan = build_mask_plan(&scores, a.alpha)?;
    plan.write(&a.out)?;
    if let Some(path) = &a.scores {
        let mut csv = String::from("channel,score\n");
        for (c, v) in scores.iter().enumerate() {
            csv += &format!("{c},{v}\n");
        }
        fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("encrypted channels {:?} -> {}", plan.encrypted(), a.out.display());
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let mut s = Settings::load(a.config.as_deref())?;
    if let Some(v) = a.listen {
        s.set("listen", v);
    }
    if let Some(v) = a.ckpt {
        s.set("ckpt", v.display());
    }
    if let Some(v) = a.mask {
        s.set("mask", v.display());
    }
    if let Some(v) = a.mode {
        s.set("mode", v);
    }
    if let Some(v) = a.max_sessions {
        s.set("max_sessions", v);
    }
    if let Some(v) = a.timeout_secs {
        s.set("session_timeout_secs", v);
    }
    if a.insecure_test_keys {
        s.set("insecure_test_keys", true);
    }
    let cfg = ServiceConfig::from_settings(&s)?;
    let model = Model::load(&cfg.checkpoint, &cfg.mask_plan, cfg.mode)?;
    let service = Service::bind(cfg.listen.as_str(), model, cfg.limits)?;
    println!("listening on {}", service.local_addr()?);
    let stats = service.run()?;
    println!("{stats:?}");
    Ok(())
}

fn write(dir: &Path, name: &str, ds: &secdood_core::features::FeatureDataset) -> Result<()> {
    let path = dir.join(name);
    write_dataset(ds, &path)?;
    println!("{} samples -> {}", ds.len(), path.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let base = SynthConfig {
        num_classes: a.classes,
        channels: a.channels,
        per_class_count: a.per_class,
        mean_separation: a.separation,
        noise_sigma: a.sigma,
        seed: a.seed,
    };
    let s = synth_splits(&base, a.ood_shift)?;
    write(&a.out_dir, "train.sdft", &s.train)?;
    write(&a.out_dir, "val.sdft", &s.val)?;
    write(&a.out_dir, "calib.sdft", &s.calib)?;
    write(&a.out_dir, "test.sdft", &s.test)?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => train(a),
        Command::Importance(a) => importance(a),
        Command::Serve(a) => serve(a),
        Command::Synth(a) => synth(a),
    }
}
