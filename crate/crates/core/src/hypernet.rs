//! Forward-only hypernetwork: maps a device profile to classifier parameters
//! `theta_d = (W, b)`.
//!
//! Single layer: `y = BN(A p + c)`. Two layers: `h = relu(BN1(A1 p + c1))`,
//! `y = BN2(A2 h + c2)`. Batch norm always runs in inference mode here (running
//! statistics); training lives in `secdood-train`. The output vector has
//! `F*K + K` entries: `W` row-major `F x K`, then `b`.
//!
//! SDHN checkpoint (little-endian):
//!
//! ```text
//! "SDHN" | version u16 = 1 | layers u8 | F u32 | H u32 | K u32 | bn u8
//! per layer: weight out x in f32 | bias out f32 | [gamma | beta | mean | var] out f32 each
//! ```
//!
//! SDTD (generated parameters): `"SDTD" | F u32 | K u32 | W f32 row-major | b f32`.

use std::fs;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::binio::{Reader, Truncated};
use crate::crypto::{encrypted_affine, Ciphertext, CryptoError, EncryptedInput, FixedPointCodec, PublicKey};
use crate::mask::MaskPlan;

pub const SDHN_MAGIC: &[u8; 4] = b"SDHN";
pub const SDHN_VERSION: u16 = 1;
pub const SDTD_MAGIC: &[u8; 4] = b"SDTD";
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum HyperNetError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite parameter in {0}")]
    NonFinite(String),
    #[error("running variance {value} <= 0 at layer {layer}, unit {unit}")]
    NonPositiveVariance { layer: usize, unit: usize, value: f64 },
    #[error("invalid hypernetwork config: {0}")]
    BadConfig(String),
    #[error("the encrypted path evaluates affine-only (single-layer) hypernetworks; got {0} layers")]
    AffineOnly(usize),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("bad magic at byte offset 0")]
    BadMagic,
    #[error("unsupported version {0} at byte offset 4")]
    UnsupportedVersion(u16),
    #[error(transparent)]
    Truncated(#[from] Truncated),
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HyperNetConfig {
    pub layers: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub batch_norm: bool,
}

impl HyperNetConfig {
    pub fn single(input_dim: usize, num_classes: usize) -> Self {
        Self {
            layers: 1,
            input_dim,
            hidden_dim: 0,
            num_classes,
            batch_norm: true,
        }
    }

    pub fn two_layer(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            layers: 2,
            input_dim,
            hidden_dim,
            num_classes,
            batch_norm: true,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.input_dim * self.num_classes + self.num_classes
    }

    pub fn validate(&self) -> Result<(), HyperNetError> {
        if !(1..=2).contains(&self.layers) {
            return Err(HyperNetError::BadConfig(format!("layers must be 1 or 2, got {}", self.layers)));
        }
        if self.layers == 2 && self.hidden_dim == 0 {
            return Err(HyperNetError::BadConfig("two-layer config needs hidden_dim > 0".into()));
        }
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(HyperNetError::BadConfig("input_dim and num_classes must be positive".into()));
        }
        Ok(())
    }

    /// `(in, out)` widths of each layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        if self.layers == 1 {
            vec![(self.input_dim, self.output_dim())]
        } else {
            vec![
                (self.input_dim, self.hidden_dim),
                (self.hidden_dim, self.output_dim()),
            ]
        }
    }
}

/// Fully connected layer, `weight` row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Uniform in `+-1/sqrt(fan_in)` for weight and bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        let weight = draw(inputs * outputs);
        let bias = draw(outputs);
        Self {
            inputs,
            outputs,
            weight,
            bias,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn identity(units: usize) -> Self {
        Self {
            gamma: vec![1.0; units],
            beta: vec![0.0; units],
            running_mean: vec![0.0; units],
            running_var: vec![1.0; units],
        }
    }

    pub fn apply(&self, z: &mut [f64]) {
        for (i, v) in z.iter_mut().enumerate() {
            *v = self.gamma[i] * (*v - self.running_mean[i]) / (self.running_var[i] + BN_EPS).sqrt() + self.beta[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub linear: Linear,
    pub bn: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperNetParams {
    pub config: HyperNetConfig,
    pub layers: Vec<Layer>,
}

impl HyperNetParams {
    pub fn init<R: Rng + ?Sized>(config: HyperNetConfig, rng: &mut R) -> Result<Self, HyperNetError> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Layer {
                linear: Linear::init(i, o, rng),
                bn: config.batch_norm.then(|| BatchNorm::identity(o)),
            })
            .collect();
        Ok(Self { config, layers })
    }

    /// Checks shapes against the config and that every entry is finite.
    pub fn validate(&self) -> Result<(), HyperNetError> {
        self.config.validate()?;
        let dims = self.config.layer_dims();
        if dims.len() != self.layers.len() {
            return Err(HyperNetError::Dimension(format!(
                "config has {} layers, params have {}",
                dims.len(),
                self.layers.len()
            )));
        }
        for (l, ((i, o), layer)) in dims.iter().zip(&self.layers).enumerate() {
            let lin = &layer.linear;
            if lin.inputs != *i || lin.outputs != *o || lin.weight.len() != i * o || lin.bias.len() != *o {
                return Err(HyperNetError::Dimension(format!("layer {l} is not {o}x{i}")));
            }
            if layer.bn.is_some() != self.config.batch_norm {
                return Err(HyperNetError::Dimension(format!("layer {l} batch-norm presence disagrees with config")));
            }
            let mut tensors = vec![("weight", &lin.weight), ("bias", &lin.bias)];
            if let Some(bn) = &layer.bn {
                tensors.extend([
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("running_mean", &bn.running_mean),
                    ("running_var", &bn.running_var),
                ]);
            }
            for (name, t) in tensors {
                if t.len() != *o && name != "weight" {
                    return Err(HyperNetError::Dimension(format!("layer {l} {name} has {} entries", t.len())));
                }
                if t.iter().any(|v| !v.is_finite()) {
                    return Err(HyperNetError::NonFinite(format!("layer {l} {name}")));
                }
            }
        }
        Ok(())
    }

    /// Flat hypernetwork output for a profile.
    pub fn forward(&self, profile: &[f64]) -> Result<Vec<f64>, HyperNetError> {
        self.validate()?;
        if profile.len() != self.config.input_dim {
            return Err(HyperNetError::Dimension(format!(
                "profile has {} entries, expected {}",
                profile.len(),
                self.config.input_dim
            )));
        }
        let last = self.layers.len() - 1;
        let mut x = profile.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            x = layer.linear.apply(&x);
            if let Some(bn) = &layer.bn {
                bn.apply(&mut x);
            }
            if l < last {
                x.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        Ok(x)
    }

    pub fn generate(&self, profile: &[f64]) -> Result<GeneratedParams, HyperNetError> {
        let out = self.forward(profile)?;
        GeneratedParams::from_flat(self.config.input_dim, self.config.num_classes, out)
    }

    pub fn encode(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(SDHN_MAGIC);
        out.extend_from_slice(&SDHN_VERSION.to_le_bytes());
        out.push(c.layers as u8);
        out.extend_from_slice(&(c.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(c.hidden_dim as u32).to_le_bytes());
        out.extend_from_slice(&(c.num_classes as u32).to_le_bytes());
        out.push(c.batch_norm as u8);
        for layer in &self.layers {
            put_f32s(&mut out, &layer.linear.weight);
            put_f32s(&mut out, &layer.linear.bias);
            if let Some(bn) = &layer.bn {
                for t in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                    put_f32s(&mut out, t);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, HyperNetError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != SDHN_MAGIC {
            return Err(HyperNetError::BadMagic);
        }
        let version = r.u16()?;
        if version != SDHN_VERSION {
            return Err(HyperNetError::UnsupportedVersion(version));
        }
        let layers = r.u8()? as usize;
        let input_dim = r.u32()? as usize;
        let hidden_dim = r.u32()? as usize;
        let num_classes = r.u32()? as usize;
        let batch_norm = match r.u8()? {
            0 => false,
            1 => true,
            other => return Err(HyperNetError::BadConfig(format!("batch-norm flag {other} at byte offset 19"))),
        };
        let config = HyperNetConfig {
            layers,
            input_dim,
            hidden_dim,
            num_classes,
            batch_norm,
        };
        config.validate()?;
        let mut params = Vec::new();
        for (i, o) in config.layer_dims() {
            let weight = get_f32s(&mut r, i.checked_mul(o).ok_or_else(|| HyperNetError::BadConfig("layer too large".into()))?)?;
            let bias = get_f32s(&mut r, o)?;
            let bn = if batch_norm {
                Some(BatchNorm {
                    gamma: get_f32s(&mut r, o)?,
                    beta: get_f32s(&mut r, o)?,
                    running_mean: get_f32s(&mut r, o)?,
                    running_var: get_f32s(&mut r, o)?,
                })
            } else {
                None
            };
            params.push(Layer {
                linear: Linear {
                    inputs: i,
                    outputs: o,
                    weight,
                    bias,
                },
                bn,
            });
        }
        if r.remaining() != 0 {
            return Err(HyperNetError::TrailingBytes(r.remaining()));
        }
        let out = Self { config, layers: params };
        out.validate()?;
        Ok(out)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, HyperNetError> {
        Self::decode(&read_file(path.as_ref())?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), HyperNetError> {
        write_file(path.as_ref(), &self.encode())
    }

    /// Rounds every tensor through `f32`, the checkpoint precision.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        let q = |t: &mut Vec<f64>| t.iter_mut().for_each(|v| *v = *v as f32 as f64);
        for layer in &mut out.layers {
            q(&mut layer.linear.weight);
            q(&mut layer.linear.bias);
            if let Some(bn) = &mut layer.bn {
                q(&mut bn.gamma);
                q(&mut bn.beta);
                q(&mut bn.running_mean);
                q(&mut bn.running_var);
            }
        }
        out
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

fn get_f32s(r: &mut Reader<'_>, n: usize) -> Result<Vec<f64>, HyperNetError> {
    if r.remaining() / 4 < n {
        return Err(Truncated {
            offset: r.offset(),
            needed: n.saturating_mul(4),
            available: r.remaining(),
        }
        .into());
    }
    (0..n).map(|_| Ok(r.f32()? as f64)).collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>, HyperNetError> {
    fs::read(path).map_err(|source| HyperNetError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HyperNetError> {
    fs::write(path, bytes).map_err(|source| HyperNetError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Absorbs inference-mode batch norm into the preceding linear layer:
/// `A' = diag(gamma/sigma) A`, `c' = gamma (c - mu)/sigma + beta`.
pub fn fold_batchnorm(params: &HyperNetParams) -> Result<HyperNetParams, HyperNetError> {
    params.validate()?;
    let mut out = params.clone();
    out.config.batch_norm = false;
    for (l, layer) in out.layers.iter_mut().enumerate() {
        let Some(bn) = layer.bn.take() else { continue };
        let lin = &mut layer.linear;
        for j in 0..lin.outputs {
            let var = bn.running_var[j];
            if var <= 0.0 {
                return Err(HyperNetError::NonPositiveVariance { layer: l, unit: j, value: var });
            }
            let s = bn.gamma[j] / (var + BN_EPS).sqrt();
            for w in &mut lin.weight[j * lin.inputs..(j + 1) * lin.inputs] {
                *w *= s;
            }
            lin.bias[j] = s * (lin.bias[j] - bn.running_mean[j]) + bn.beta[j];
        }
    }
    Ok(out)
}

/// Evaluates a single-layer hypernetwork on an encrypted profile. Batch norm
/// is folded first if still present. Outputs are at scale depth 2, ordered
/// like [`HyperNetParams::forward`].
pub fn encrypted_generate(
    pk: &PublicKey,
    profile: &[EncryptedInput],
    params: &HyperNetParams,
    codec: &FixedPointCodec,
) -> Result<Vec<Ciphertext>, HyperNetError> {
    if params.config.layers != 1 {
        return Err(HyperNetError::AffineOnly(params.config.layers));
    }
    let folded = if params.config.batch_norm {
        fold_batchnorm(params)?
    } else {
        params.validate()?;
        params.clone()
    };
    let lin = &folded.layers[0].linear;
    Ok(encrypted_affine(pk, profile, &lin.weight, lin.inputs, &lin.bias, codec)?)
}

/// Device classifier parameters: `W` is `F x K` row-major, `b` has `K` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedParams {
    features: usize,
    classes: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl GeneratedParams {
    pub fn new(features: usize, classes: usize, w: Vec<f64>, b: Vec<f64>) -> Result<Self, HyperNetError> {
        if features == 0 || classes == 0 || w.len() != features * classes || b.len() != classes {
            return Err(HyperNetError::Dimension(format!(
                "W has {} entries and b {}, expected {features}x{classes} and {classes}",
                w.len(),
                b.len()
            )));
        }
        if w.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(HyperNetError::NonFinite("generated parameters".into()));
        }
        Ok(Self { features, classes, w, b })
    }

    /// Splits a flat hypernetwork output of length `F*K + K`.
    pub fn from_flat(features: usize, classes: usize, mut flat: Vec<f64>) -> Result<Self, HyperNetError> {
        if flat.len() != features * classes + classes {
            return Err(HyperNetError::Dimension(format!(
                "flat output has {} entries, expected {}",
                flat.len(),
                features * classes + classes
            )));
        }
        let b = flat.split_off(features * classes);
        Self::new(features, classes, flat, b)
    }

    pub fn zeros(features: usize, classes: usize) -> Self {
        Self {
            features,
            classes,
            w: vec![0.0; features * classes],
            b: vec![0.0; classes],
        }
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn flat(&self) -> Vec<f64> {
        self.w.iter().chain(&self.b).copied().collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * (self.w.len() + self.b.len()));
        out.extend_from_slice(SDTD_MAGIC);
        out.extend_from_slice(&(self.features as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        put_f32s(&mut out, &self.w);
        put_f32s(&mut out, &self.b);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, HyperNetError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != SDTD_MAGIC {
            return Err(HyperNetError::BadMagic);
        }
        let features = r.u32()? as usize;
        let classes = r.u32()? as usize;
        let n = features
            .checked_mul(classes)
            .ok_or_else(|| HyperNetError::Dimension("W too large".into()))?;
        let w = get_f32s(&mut r, n)?;
        let b = get_f32s(&mut r, classes)?;
        if r.remaining() != 0 {
            return Err(HyperNetError::TrailingBytes(r.remaining()));
        }
        Self::new(features, classes, w, b)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, HyperNetError> {
        Self::decode(&read_file(path.as_ref())?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), HyperNetError> {
        write_file(path.as_ref(), &self.encode())
    }

    pub fn quantized(&self) -> Self {
        let q = |t: &[f64]| t.iter().map(|v| *v as f32 as f64).collect();
        Self {
            features: self.features,
            classes: self.classes,
            w: q(&self.w),
            b: q(&self.b),
        }
    }
}

/// `logits = W^T x + b`.
pub fn classifier_forward(theta: &GeneratedParams, x: &[f64]) -> Result<Vec<f64>, HyperNetError> {
    if x.len() != theta.features {
        return Err(HyperNetError::Dimension(format!(
            "feature has {} channels, classifier expects {}",
            x.len(),
            theta.features
        )));
    }
    let k = theta.classes;
    let mut logits = theta.b.clone();
    for (f, xf) in x.iter().enumerate() {
        for (l, w) in logits.iter_mut().zip(&theta.w[f * k..(f + 1) * k]) {
            *l += w * xf;
        }
    }
    Ok(logits)
}

/// Batch-mean feature vector with masked channels zeroed; the hypernetwork input.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceProfile {
    values: Vec<f64>,
}

impl DeviceProfile {
    pub fn from_batch<'a>(
        batch: impl IntoIterator<Item = &'a [f64]>,
        plan: Option<&MaskPlan>,
        channels: usize,
    ) -> Result<Self, HyperNetError> {
        let mut sum = vec![0.0; channels];
        let mut n = 0usize;
        for x in batch {
            if x.len() != channels {
                return Err(HyperNetError::Dimension(format!(
                    "sample has {} channels, expected {channels}",
                    x.len()
                )));
            }
            sum.iter_mut().zip(x).for_each(|(s, v)| *s += v);
            n += 1;
        }
        if n > 0 {
            sum.iter_mut().for_each(|s| *s /= n as f64);
        }
        if let Some(plan) = plan {
            if plan.channels() != channels {
                return Err(HyperNetError::Dimension(format!(
                    "mask plan covers {} channels, features have {channels}",
                    plan.channels()
                )));
            }
            plan.apply(&mut sum);
        }
        Ok(Self { values: sum })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, KeyGenOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_bn<R: Rng>(units: usize, rng: &mut R) -> BatchNorm {
        BatchNorm {
            gamma: (0..units).map(|_| rng.random_range(0.5..2.0)).collect(),
            beta: (0..units).map(|_| rng.random_range(-1.0..1.0)).collect(),
            running_mean: (0..units).map(|_| rng.random_range(-1.0..1.0)).collect(),
            running_var: (0..units).map(|_| rng.random_range(0.1..3.0)).collect(),
        }
    }

    fn random_params(config: HyperNetConfig, seed: u64) -> HyperNetParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = HyperNetParams::init(config, &mut rng).unwrap();
        for layer in &mut p.layers {
            if layer.bn.is_some() {
                layer.bn = Some(random_bn(layer.linear.outputs, &mut rng));
            }
        }
        p
    }

    // Scalar-loop reference, written independently of Linear::apply.
    fn reference_forward(p: &HyperNetParams, profile: &[f64]) -> Vec<f64> {
        let mut x = profile.to_vec();
        for (l, layer) in p.layers.iter().enumerate() {
            let lin = &layer.linear;
            let mut y = vec![0.0; lin.outputs];
            for j in 0..lin.outputs {
                let mut acc = lin.bias[j];
                for i in 0..lin.inputs {
                    acc += lin.weight[j * lin.inputs + i] * x[i];
                }
                if let Some(bn) = &layer.bn {
                    acc = (acc - bn.running_mean[j]) / (bn.running_var[j] + 1e-5).sqrt() * bn.gamma[j] + bn.beta[j];
                }
                if l + 1 < p.layers.len() && acc < 0.0 {
                    acc = 0.0;
                }
                y[j] = acc;
            }
            x = y;
        }
        x
    }

    #[test]
    fn zero_weights_give_constant_output() {
        let mut cfg = HyperNetConfig::single(3, 2);
        cfg.batch_norm = false;
        let mut p = random_params(cfg, 1);
        p.layers[0].linear.weight.iter_mut().for_each(|w| *w = 0.0);
        let v: Vec<f64> = (0..8).map(|i| i as f64 * 0.5 - 1.0).collect();
        p.layers[0].linear.bias = v.clone();
        for profile in [[0.0, 0.0, 0.0], [5.0, -3.0, 1.0]] {
            let g = p.generate(&profile).unwrap();
            assert_eq!(g.w(), &v[..6]);
            assert_eq!(g.b(), &v[6..]);
        }
    }

    #[test]
    fn basis_probe_reads_weight_column() {
        let mut cfg = HyperNetConfig::single(4, 2);
        cfg.batch_norm = false;
        let p = random_params(cfg, 2);
        let out = p.forward(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        let lin = &p.layers[0].linear;
        for j in 0..lin.outputs {
            assert!((out[j] - (lin.weight[j * 4] + lin.bias[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (seed, cfg) in [
            (10, HyperNetConfig::single(16, 8)),
            (11, HyperNetConfig::two_layer(16, 64, 8)),
            (12, HyperNetConfig { batch_norm: false, ..HyperNetConfig::two_layer(5, 7, 3) }),
        ] {
            let p = random_params(cfg, seed);
            let profile: Vec<f64> = (0..cfg.input_dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let got = p.forward(&profile).unwrap();
            let want = reference_forward(&p, &profile);
            assert_eq!(got.len(), cfg.output_dim());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let mut p = random_params(HyperNetConfig::single(3, 2), 4);
        assert!(matches!(p.forward(&[1.0, 2.0]), Err(HyperNetError::Dimension(_))));
        p.layers[0].linear.weight[0] = f64::NAN;
        assert!(matches!(p.forward(&[1.0, 2.0, 3.0]), Err(HyperNetError::NonFinite(_))));
    }

    #[test]
    fn classifier_examples() {
        let theta = GeneratedParams::new(3, 2, vec![0.0; 6], vec![1.0, 2.0]).unwrap();
        assert_eq!(classifier_forward(&theta, &[4.0, -1.0, 9.0]).unwrap(), vec![1.0, 2.0]);
        // identity block: W[f][k] = 1 iff f == k
        let theta = GeneratedParams::new(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], vec![0.0; 3]).unwrap();
        assert_eq!(classifier_forward(&theta, &[0.0, 1.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0]);
        assert!(classifier_forward(&theta, &[1.0]).is_err());
    }

    #[test]
    fn classifier_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (f, k) = (16, 8);
        let w: Vec<f64> = (0..f * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..f).map(|_| rng.random_range(-5.0..5.0)).collect();
        let theta = GeneratedParams::new(f, k, w.clone(), b.clone()).unwrap();
        let logits = classifier_forward(&theta, &x).unwrap();
        for j in 0..k {
            let mut acc = b[j];
            for i in 0..f {
                acc += w[i * k + j] * x[i];
            }
            assert!((logits[j] - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_bn_fold_is_noop() {
        let p = HyperNetParams::init(HyperNetConfig::single(4, 3), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let folded = fold_batchnorm(&p).unwrap();
        assert!(!folded.config.batch_norm);
        let s = 1.0 / (1.0 + BN_EPS).sqrt();
        for (a, b) in folded.layers[0].linear.weight.iter().zip(&p.layers[0].linear.weight) {
            assert!((a - b).abs() <= (1.0 - s) * b.abs() + 1e-15);
        }
    }

    #[test]
    fn fold_matches_unfolded_on_probes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for cfg in [HyperNetConfig::single(16, 8), HyperNetConfig::two_layer(8, 12, 4)] {
            let p = random_params(cfg, 8);
            let folded = fold_batchnorm(&p).unwrap();
            for _ in 0..100 {
                let probe: Vec<f64> = (0..cfg.input_dim).map(|_| rng.random_range(-4.0..4.0)).collect();
                let a = p.forward(&probe).unwrap();
                let b = folded.forward(&probe).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    assert!((x - y).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn fold_variance_boundary() {
        let mut p = random_params(HyperNetConfig::single(3, 2), 9);
        p.layers[0].bn.as_mut().unwrap().running_var[1] = 1e-12;
        let folded = fold_batchnorm(&p).unwrap();
        assert!(folded.validate().is_ok());
        p.layers[0].bn.as_mut().unwrap().running_var[2] = 0.0;
        assert!(matches!(
            fold_batchnorm(&p),
            Err(HyperNetError::NonPositiveVariance { layer: 0, unit: 2, .. })
        ));
    }

    fn encrypt_profile(kp: &crate::crypto::KeyPair, codec: &FixedPointCodec, profile: &[f64]) -> Vec<EncryptedInput> {
        profile
            .iter()
            .enumerate()
            .map(|(index, &x)| EncryptedInput {
                index,
                ct: kp.public.encrypt(&codec.encode(x, &kp.public).unwrap()).unwrap(),
            })
            .collect()
    }

    fn decrypt_outputs(kp: &crate::crypto::KeyPair, codec: &FixedPointCodec, cts: &[Ciphertext]) -> Vec<f64> {
        cts.iter()
            .map(|c| codec.decode(&kp.private.decrypt(c).unwrap(), c.scale(), &kp.public).unwrap())
            .collect()
    }

    #[test]
    fn encrypted_zero_weights_give_bias() {
        let kp = keygen(KeyGenOptions::insecure_test(40)).unwrap();
        let codec = FixedPointCodec::default();
        let mut cfg = HyperNetConfig::single(4, 2);
        cfg.batch_norm = false;
        let mut p = random_params(cfg, 10);
        p.layers[0].linear.weight.iter_mut().for_each(|w| *w = 0.0);
        p.layers[0].linear.bias = vec![0.5, -1.25, 3.0, 0.0, 2.5, -0.125, 7.75, -3.0, 1.0, 0.25];
        let cts = encrypted_generate(&kp.public, &encrypt_profile(&kp, &codec, &[1.0, 2.0, 3.0, 4.0]), &p, &codec).unwrap();
        assert_eq!(decrypt_outputs(&kp, &codec, &cts), p.layers[0].linear.bias);
    }

    #[test]
    fn encrypted_matches_plaintext_forward() {
        let kp = keygen(KeyGenOptions::insecure_test(41)).unwrap();
        let codec = FixedPointCodec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_params(HyperNetConfig::single(16, 4), 12);
        let profile: Vec<f64> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
        let cts = encrypted_generate(&kp.public, &encrypt_profile(&kp, &codec, &profile), &p, &codec).unwrap();
        let plain = p.forward(&profile).unwrap();
        for (a, b) in decrypt_outputs(&kp, &codec, &cts).iter().zip(&plain) {
            assert!((a - b).abs() <= 1e-3);
        }
    }

    #[test]
    fn encrypted_path_refuses_two_layers() {
        let kp = keygen(KeyGenOptions::insecure_test(42)).unwrap();
        let p = random_params(HyperNetConfig::two_layer(4, 3, 2), 13);
        let err = encrypted_generate(&kp.public, &[], &p, &FixedPointCodec::default()).unwrap_err();
        assert!(matches!(err, HyperNetError::AffineOnly(2)));
        assert!(err.to_string().contains("affine-only"));
    }

    #[test]
    fn checkpoint_roundtrip_is_f32_exact() {
        for cfg in [HyperNetConfig::single(5, 3), HyperNetConfig::two_layer(4, 6, 2)] {
            let p = random_params(cfg, 14).quantized();
            let bytes = p.encode();
            assert_eq!(&bytes[..4], b"SDHN");
            assert_eq!(bytes[6], cfg.layers as u8);
            let back = HyperNetParams::decode(&bytes).unwrap();
            assert_eq!(back, p);
            assert_eq!(back.encode(), bytes);
            assert!(HyperNetParams::decode(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn sdtd_layout() {
        let theta = GeneratedParams::new(2, 1, vec![1.5, -0.25], vec![2.0]).unwrap();
        let bytes = theta.encode();
        let mut want = b"SDTD".to_vec();
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        for v in [1.5f32, -0.25, 2.0] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(bytes, want);
        assert_eq!(GeneratedParams::decode(&bytes).unwrap(), theta);
        assert!(GeneratedParams::decode(&bytes[..15]).is_err());
    }

    #[test]
    fn profile_is_masked_batch_mean() {
        let plan = MaskPlan::from_encrypted(3, 0.5, vec![0, 2]).unwrap();
        let rows = [vec![1.0, 10.0, 3.0], vec![3.0, 20.0, 5.0]];
        let p = DeviceProfile::from_batch(rows.iter().map(|r| r.as_slice()), Some(&plan), 3).unwrap();
        assert_eq!(p.values(), &[2.0, 0.0, 4.0]);
    }
}
