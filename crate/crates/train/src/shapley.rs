//! Channel importance as Shapley values of a coalition game over channels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use secdood_core::features::{split, FeatureDataset};
use secdood_core::hypernet::{classifier_forward, GeneratedParams};

use crate::classifier::{softmax_xent, train_reference, ReferenceOptions};
use crate::TrainError;

pub const MAX_EXACT_CHANNELS: usize = 16;

/// Utility of a channel coalition; `subset[c]` is true when channel `c` is in.
pub trait ValueFunction: Sync {
    fn channels(&self) -> usize;
    fn value(&self, subset: &[bool]) -> f64;
}

/// Wraps a closure as a value function.
pub struct FnGame<F> {
    channels: usize,
    f: F,
}

impl<F: Fn(&[bool]) -> f64 + Sync> FnGame<F> {
    pub fn new(channels: usize, f: F) -> Self {
        Self { channels, f }
    }
}

impl<F: Fn(&[bool]) -> f64 + Sync> ValueFunction for FnGame<F> {
    fn channels(&self) -> usize {
        self.channels
    }

    fn value(&self, subset: &[bool]) -> f64 {
        (self.f)(subset)
    }
}

/// Mean negative cross-entropy of a frozen classifier on a fixed batch whose
/// channels outside the coalition are zeroed.
pub struct ReferenceModelValue {
    theta: GeneratedParams,
    xs: Vec<Vec<f64>>,
    ys: Vec<usize>,
}

impl ReferenceModelValue {
    pub fn new(theta: GeneratedParams, xs: Vec<Vec<f64>>, ys: Vec<usize>) -> Result<Self, TrainError> {
        if xs.is_empty() {
            return Err(TrainError::EmptyDataset("value-function batch"));
        }
        if xs.iter().any(|x| x.len() != theta.features()) || xs.len() != ys.len() {
            return Err(TrainError::Dimension("value-function batch does not match classifier".into()));
        }
        Ok(Self { theta, xs, ys })
    }

    pub fn classifier(&self) -> &GeneratedParams {
        &self.theta
    }
}

impl ValueFunction for ReferenceModelValue {
    fn channels(&self) -> usize {
        self.theta.features()
    }

    fn value(&self, subset: &[bool]) -> f64 {
        let mut total = 0.0;
        let mut masked = vec![0.0; subset.len()];
        for (x, &y) in self.xs.iter().zip(&self.ys) {
            for ((m, v), keep) in masked.iter_mut().zip(x).zip(subset) {
                *m = if *keep { *v } else { 0.0 };
            }
            match classifier_forward(&self.theta, &masked) {
                Ok(l) => total += softmax_xent(&l, y).0,
                Err(_) => return f64::NAN,
            }
        }
        -total / self.xs.len() as f64
    }
}

fn members(subset: &[bool]) -> Vec<usize> {
    subset.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

fn checked<G: ValueFunction + ?Sized>(game: &G, subset: &[bool]) -> Result<f64, TrainError> {
    let v = game.value(subset);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TrainError::NonFiniteValue { subset: members(subset) })
    }
}

/// Exact Shapley values by enumerating all `2^C` coalitions with weights
/// `|U|! (C-|U|-1)! / C!`.
pub fn shapley_exact<G: ValueFunction + ?Sized>(game: &G) -> Result<Vec<f64>, TrainError> {
    let c = game.channels();
    if c == 0 || c > MAX_EXACT_CHANNELS {
        return Err(TrainError::TooManyChannels { channels: c, max: MAX_EXACT_CHANNELS });
    }
    let values: Vec<f64> = (0u32..1 << c)
        .into_par_iter()
        .map(|mask| {
            let subset: Vec<bool> = (0..c).map(|i| mask >> i & 1 == 1).collect();
            checked(game, &subset)
        })
        .collect::<Result<_, _>>()?;
    // weight[s] = s! (c-s-1)! / c!
    let mut weight = vec![0.0; c];
    for (s, w) in weight.iter_mut().enumerate() {
        let mut v = 1.0 / c as f64;
        for t in 1..=s {
            v *= t as f64 / (c - t) as f64;
        }
        *w = v;
    }
    let mut scores = vec![0.0; c];
    for (i, score) in scores.iter_mut().enumerate() {
        let bit = 1usize << i;
        for mask in 0..1usize << c {
            if mask & bit == 0 {
                *score += weight[mask.count_ones() as usize] * (values[mask | bit] - values[mask]);
            }
        }
    }
    Ok(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MonteCarloConfig {
    pub permutations: usize,
    pub seed: u64,
    /// Pair every sampled permutation with its reverse.
    pub antithetic: bool,
}

impl MonteCarloConfig {
    pub fn new(permutations: usize, seed: u64) -> Self {
        Self {
            permutations,
            seed,
            antithetic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloEstimate {
    pub scores: Vec<f64>,
    /// Standard error of each score across permutations.
    pub std_errors: Vec<f64>,
}

/// The permutations a Monte-Carlo run visits: a Fisher-Yates shuffle of
/// `0..C` per draw from one `ChaCha8Rng` seeded with `seed`.
pub fn sample_permutations(channels: usize, cfg: &MonteCarloConfig) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut perms = Vec::with_capacity(cfg.permutations);
    while perms.len() < cfg.permutations {
        let mut p: Vec<usize> = (0..channels).collect();
        p.shuffle(&mut rng);
        if cfg.antithetic && perms.len() + 1 < cfg.permutations {
            let mut r = p.clone();
            r.reverse();
            perms.push(p);
            perms.push(r);
        } else {
            perms.push(p);
        }
    }
    perms
}

/// Marginal contribution of every channel along each sampled permutation.
/// Permutations are evaluated in parallel; the result is in sampling order.
pub fn permutation_marginals<G: ValueFunction + ?Sized>(
    game: &G,
    cfg: &MonteCarloConfig,
) -> Result<Vec<Vec<f64>>, TrainError> {
    let c = game.channels();
    if cfg.permutations == 0 {
        return Err(TrainError::NoPermutations);
    }
    if c == 0 {
        return Err(TrainError::Dimension("game has no channels".into()));
    }
    let empty = checked(game, &vec![false; c])?;
    let full = checked(game, &vec![true; c])?;
    sample_permutations(c, cfg)
        .par_iter()
        .map(|perm| {
            let mut subset = vec![false; c];
            let mut prev = empty;
            let mut out = vec![0.0; c];
            for (step, &ch) in perm.iter().enumerate() {
                subset[ch] = true;
                let v = if step + 1 == c { full } else { checked(game, &subset)? };
                out[ch] = v - prev;
                prev = v;
            }
            Ok(out)
        })
        .collect()
}

/// Permutation-sampling estimate. Each permutation's marginals telescope to
/// `f(full) - f(empty)`, so efficiency holds for the average as well.
pub fn shapley_monte_carlo<G: ValueFunction + ?Sized>(
    game: &G,
    cfg: &MonteCarloConfig,
) -> Result<MonteCarloEstimate, TrainError> {
    let c = game.channels();
    let marginals = permutation_marginals(game, cfg)?;
    let n = marginals.len() as f64;
    let mut sum = vec![0.0; c];
    let mut sum_sq = vec![0.0; c];
    for m in &marginals {
        for i in 0..c {
            sum[i] += m[i];
            sum_sq[i] += m[i] * m[i];
        }
    }
    let scores: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_errors = (0..c)
        .map(|i| {
            if n < 2.0 {
                return f64::INFINITY;
            }
            let var = ((sum_sq[i] - n * scores[i] * scores[i]) / (n - 1.0)).max(0.0);
            (var / n).sqrt()
        })
        .collect();
    Ok(MonteCarloEstimate { scores, std_errors })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImportanceConfig {
    pub permutations: usize,
    pub seed: u64,
    pub validation_samples: usize,
    pub reference: ReferenceOptions,
}

impl Default for ImportanceConfig {
    fn default() -> Self {
        Self {
            permutations: 2000,
            seed: 0,
            validation_samples: 256,
            reference: ReferenceOptions::default(),
        }
    }
}

fn labeled(ds: &FeatureDataset) -> (Vec<Vec<f64>>, Vec<usize>) {
    ds.samples()
        .iter()
        .filter_map(|s| s.label.class().map(|c| (s.feature.to_f64(), c)))
        .unzip()
}

/// Builds the reference value function from ID training data: 80% trains the
/// frozen classifier, the first `validation_samples` of the rest form the
/// evaluation batch.
pub fn reference_game(train: &FeatureDataset, cfg: &ImportanceConfig) -> Result<ReferenceModelValue, TrainError> {
    train.check_trainable()?;
    if train.len() < 2 {
        return Err(TrainError::EmptyDataset("importance training set"));
    }
    let (fit, held) = split(train, 0.8, cfg.seed)?;
    let (xs, ys) = labeled(&fit);
    let theta = train_reference(&xs, &ys, train.num_classes(), cfg.reference)?;
    let (mut vx, mut vy) = labeled(&held);
    vx.truncate(cfg.validation_samples);
    vy.truncate(cfg.validation_samples);
    ReferenceModelValue::new(theta, vx, vy)
}

/// Monte-Carlo Shapley importance of every channel of `train`.
pub fn compute_importance(train: &FeatureDataset, cfg: &ImportanceConfig) -> Result<Vec<f64>, TrainError> {
    let game = reference_game(train, cfg)?;
    Ok(shapley_monte_carlo(&game, &MonteCarloConfig::new(cfg.permutations, cfg.seed))?.scores)
}
