//! Hypernetwork training with hand-written backpropagation.
//!
//! Each batch is turned into one profile (the batch mean, optionally with a
//! random channel subset zeroed), the hypernetwork maps it to `(W, b)` and the
//! loss is the mean cross-entropy of that classifier over the batch. Batch
//! norm normalizes with its running statistics during training as well; after
//! each step they move towards the mean and variance of the per-sample
//! pre-normalization outputs of the batch.

use log::debug;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use secdood_core::features::FeatureDataset;
use secdood_core::hypernet::{
    classifier_forward, BatchNorm, DeviceProfile, GeneratedParams, HyperNetConfig, HyperNetParams, BN_EPS,
};
use secdood_core::mask::encrypted_count;

use crate::adam::Adam;
use crate::classifier::{accuracy, softmax_xent};
use crate::TrainError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Probability that a training batch gets a random channel mask.
    pub mask_prob: f64,
    /// Fraction of channels kept by an augmentation mask.
    pub mask_alpha: f64,
    pub bn_momentum: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 16,
            epochs: 50,
            seed: 0,
            mask_prob: 0.5,
            mask_alpha: 0.5,
            bn_momentum: 0.1,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |name, reason: &str| Err(TrainError::BadOption { name, reason: reason.into() });
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be finite and >= 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return bad("mask_prob", "must be in [0, 1]");
        }
        if !(self.mask_alpha > 0.0 && self.mask_alpha <= 1.0) {
            return bad("mask_alpha", "must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_momentum", "must be in [0, 1]");
        }
        Ok(())
    }
}

/// Gradient of the loss with respect to every trainable tensor of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Trainable entries of all layers in the order weight, bias, gamma, beta.
pub fn trainable(params: &HyperNetParams) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in &params.layers {
        out.extend(&layer.linear.weight);
        out.extend(&layer.linear.bias);
        if let Some(bn) = &layer.bn {
            out.extend(&bn.gamma);
            out.extend(&bn.beta);
        }
    }
    out
}

/// Inverse of [`trainable`]; running statistics are left alone.
pub fn set_trainable(params: &mut HyperNetParams, flat: &[f64]) {
    let mut at = 0;
    let mut take = |dst: &mut Vec<f64>| {
        let n = dst.len();
        dst.copy_from_slice(&flat[at..at + n]);
        at += n;
    };
    for layer in &mut params.layers {
        take(&mut layer.linear.weight);
        take(&mut layer.linear.bias);
        if let Some(bn) = &mut layer.bn {
            take(&mut bn.gamma);
            take(&mut bn.beta);
        }
    }
}

fn flatten(grads: &[LayerGrad]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.weight.iter().chain(&g.bias).chain(&g.gamma).chain(&g.beta).copied())
        .collect()
}

fn bn_scale(bn: &BatchNorm) -> Vec<f64> {
    bn.running_var.iter().map(|v| (v + BN_EPS).sqrt()).collect()
}

struct Cache {
    input: Vec<f64>,
    z: Vec<f64>,
    u: Vec<f64>,
}

/// Mean cross-entropy of the classifier generated from `profile` on the batch,
/// with its gradient for every layer.
pub fn loss_and_grad(
    params: &HyperNetParams,
    profile: &[f64],
    xs: &[&[f64]],
    ys: &[usize],
) -> Result<(f64, Vec<LayerGrad>), TrainError> {
    if xs.is_empty() {
        return Err(TrainError::EmptyDataset("batch"));
    }
    params.validate()?;
    let cfg = params.config;
    if profile.len() != cfg.input_dim {
        return Err(TrainError::Dimension(format!("profile has {} entries", profile.len())));
    }
    let last = params.layers.len() - 1;
    let mut caches = Vec::with_capacity(params.layers.len());
    let mut a = profile.to_vec();
    for (l, layer) in params.layers.iter().enumerate() {
        let z = layer.linear.apply(&a);
        let mut u = z.clone();
        if let Some(bn) = &layer.bn {
            bn.apply(&mut u);
        }
        let out = if l < last { u.iter().map(|v| v.max(0.0)).collect() } else { u.clone() };
        caches.push(Cache { input: a, z, u });
        a = out;
    }
    let theta = GeneratedParams::from_flat(cfg.input_dim, cfg.num_classes, a)?;
    let (f, k) = (cfg.input_dim, cfg.num_classes);
    let n = xs.len() as f64;
    let mut loss = 0.0;
    let mut dy = vec![0.0; f * k + k];
    for (x, &y) in xs.iter().zip(ys) {
        if x.len() != f {
            return Err(TrainError::Dimension(format!("sample has {} channels, expected {f}", x.len())));
        }
        let (l, g) = softmax_xent(&classifier_forward(&theta, x)?, y);
        loss += l / n;
        for (i, xi) in x.iter().enumerate() {
            for j in 0..k {
                dy[i * k + j] += xi * g[j] / n;
            }
        }
        for j in 0..k {
            dy[f * k + j] += g[j] / n;
        }
    }

    let mut grads = Vec::with_capacity(params.layers.len());
    let mut dout = dy;
    for (l, (layer, cache)) in params.layers.iter().zip(&caches).enumerate().rev() {
        let mut du = dout;
        if l < last {
            du.iter_mut().zip(&cache.u).for_each(|(d, u)| {
                if *u <= 0.0 {
                    *d = 0.0
                }
            });
        }
        let (dz, gamma, beta) = match &layer.bn {
            Some(bn) => {
                let s = bn_scale(bn);
                let dgamma = (0..du.len()).map(|j| du[j] * (cache.z[j] - bn.running_mean[j]) / s[j]).collect();
                let dz = (0..du.len()).map(|j| du[j] * bn.gamma[j] / s[j]).collect();
                (dz, dgamma, du)
            }
            None => (du, Vec::new(), Vec::new()),
        };
        let lin = &layer.linear;
        let mut dw = vec![0.0; lin.weight.len()];
        let mut da = vec![0.0; lin.inputs];
        for (j, dzj) in dz.iter().enumerate() {
            let row = &lin.weight[j * lin.inputs..(j + 1) * lin.inputs];
            for i in 0..lin.inputs {
                dw[j * lin.inputs + i] = dzj * cache.input[i];
                da[i] += row[i] * dzj;
            }
        }
        grads.push(LayerGrad {
            weight: dw,
            bias: dz,
            gamma,
            beta,
        });
        dout = da;
    }
    grads.reverse();
    Ok((loss, grads))
}

/// Moves each layer's running statistics towards the batch mean and unbiased
/// variance of the per-sample pre-normalization outputs. `keep` zeroes the
/// channels masked out of the profile.
fn update_running_stats(params: &mut HyperNetParams, xs: &[&[f64]], keep: Option<&[bool]>, momentum: f64) {
    if xs.len() < 2 || !params.config.batch_norm {
        return;
    }
    let n = xs.len() as f64;
    let mut acts: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| match keep {
            Some(k) => x.iter().zip(k).map(|(v, &on)| if on { *v } else { 0.0 }).collect(),
            None => x.to_vec(),
        })
        .collect();
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter_mut().enumerate() {
        let zs: Vec<Vec<f64>> = acts.iter().map(|a| layer.linear.apply(a)).collect();
        let bn = layer.bn.as_mut().expect("batch norm enabled");
        if l < last {
            acts = zs
                .iter()
                .map(|z| {
                    let mut u = z.clone();
                    bn.apply(&mut u);
                    u.into_iter().map(|v| v.max(0.0)).collect()
                })
                .collect();
        }
        for j in 0..bn.running_mean.len() {
            let mean = zs.iter().map(|z| z[j]).sum::<f64>() / n;
            let var = zs.iter().map(|z| (z[j] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            bn.running_mean[j] = (1.0 - momentum) * bn.running_mean[j] + momentum * mean;
            bn.running_var[j] = (1.0 - momentum) * bn.running_var[j] + momentum * var;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the epoch with the lowest validation loss.
    pub params: HyperNetParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

struct Data {
    xs: Vec<Vec<f64>>,
    ys: Vec<usize>,
}

fn data(ds: &FeatureDataset, what: &'static str) -> Result<Data, TrainError> {
    ds.check_trainable()?;
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset(what));
    }
    let (xs, ys) = ds
        .samples()
        .iter()
        .map(|s| (s.feature.to_f64(), s.label.class().expect("ID sample")))
        .unzip();
    Ok(Data { xs, ys })
}

fn batch_profile(xs: &[&[f64]], keep: Option<&[bool]>, channels: usize) -> Result<Vec<f64>, TrainError> {
    let mut p = DeviceProfile::from_batch(xs.iter().copied(), None, channels)?.values().to_vec();
    if let Some(k) = keep {
        p.iter_mut().zip(k).for_each(|(v, &on)| {
            if !on {
                *v = 0.0
            }
        });
    }
    Ok(p)
}

/// Mean validation loss over consecutive unmasked batches, and the accuracy
/// of the classifier generated from the whole set's profile.
pub fn evaluate(params: &HyperNetParams, ds: &FeatureDataset, batch_size: usize) -> Result<(f64, f64), TrainError> {
    let d = data(ds, "validation set")?;
    let refs: Vec<&[f64]> = d.xs.iter().map(Vec::as_slice).collect();
    let mut loss = 0.0;
    for (xb, yb) in refs.chunks(batch_size.max(1)).zip(d.ys.chunks(batch_size.max(1))) {
        let profile = batch_profile(xb, None, ds.channels())?;
        let theta = params.generate(&profile)?;
        for (x, &y) in xb.iter().zip(yb) {
            loss += softmax_xent(&classifier_forward(&theta, x)?, y).0;
        }
    }
    let theta = params.generate(&batch_profile(&refs, None, ds.channels())?)?;
    Ok((loss / refs.len() as f64, accuracy(&theta, &d.xs, &d.ys)?))
}

pub fn train_hypernet(
    config: HyperNetConfig,
    train: &FeatureDataset,
    val: &FeatureDataset,
    opts: &TrainOptions,
) -> Result<TrainOutcome, TrainError> {
    opts.validate()?;
    config.validate()?;
    let c = train.channels();
    if c != config.input_dim || train.num_classes() != config.num_classes {
        return Err(TrainError::Dimension(format!(
            "training set is {}x{}, config expects {}x{}",
            train.num_classes(),
            c,
            config.num_classes,
            config.input_dim
        )));
    }
    if val.channels() != c || val.num_classes() != train.num_classes() {
        return Err(TrainError::Dimension("train and validation sets disagree in F or K".into()));
    }
    let d = data(train, "training set")?;
    data(val, "validation set")?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut params = HyperNetParams::init(config, &mut rng)?;
    let mut flat = trainable(&params);
    let mut adam = Adam::new(flat.len(), opts.lr);
    let kept = encrypted_count(opts.mask_alpha, c);
    let channel_ids: Vec<usize> = (0..c).collect();
    let mut order: Vec<usize> = (0..d.xs.len()).collect();
    let mut best: Option<(HyperNetParams, usize, f64)> = None;
    let mut history = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (bi, idx) in order.chunks(opts.batch_size).enumerate() {
            let xb: Vec<&[f64]> = idx.iter().map(|&i| d.xs[i].as_slice()).collect();
            let yb: Vec<usize> = idx.iter().map(|&i| d.ys[i]).collect();
            let keep = (rng.random::<f64>() < opts.mask_prob).then(|| {
                let mut k = vec![false; c];
                for &ch in channel_ids.choose_multiple(&mut rng, kept) {
                    k[ch] = true;
                }
                k
            });
            let profile = batch_profile(&xb, keep.as_deref(), c)?;
            let (loss, grads) = loss_and_grad(&params, &profile, &xb, &yb)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: bi });
            }
            epoch_loss += loss * xb.len() as f64;
            update_running_stats(&mut params, &xb, keep.as_deref(), opts.bn_momentum);
            adam.step(&mut flat, &flatten(&grads));
            set_trainable(&mut params, &flat);
        }
        let (val_loss, val_accuracy) = evaluate(&params, val, opts.batch_size)?;
        let train_loss = epoch_loss / d.xs.len() as f64;
        debug!("epoch {epoch}: train loss {train_loss:.5}, val loss {val_loss:.5}, val acc {val_accuracy:.4}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        });
        if val_loss.is_finite() && best.as_ref().is_none_or(|b| val_loss < b.2) {
            best = Some((params.clone(), epoch, val_loss));
        }
    }
    let (params, best_epoch, best_val_loss) = match best {
        Some(b) => b,
        None => (params, opts.epochs - 1, f64::NAN),
    };
    Ok(TrainOutcome {
        params,
        best_epoch,
        best_val_loss,
        history,
    })
}
