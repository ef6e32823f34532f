//! Post-hoc OOD scores. Every method follows one sign convention: a higher
//! score means more in-distribution.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::features::FeatureDataset;
use crate::hypernet::{classifier_forward, GeneratedParams, HyperNetError};

/// Minimum number of ID scores accepted by [`calibrate_threshold`].
pub const MIN_CALIBRATION_SCORES: usize = 20;
pub const COVARIANCE_RIDGE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("unknown score method {0:?}")]
    UnknownMethod(String),
    #[error("parameter {name} = {value} out of range")]
    BadParameter { name: &'static str, value: f64 },
    #[error("class {0} has no training samples")]
    EmptyClass(usize),
    #[error("{method} needs {what}, which was not fitted")]
    MissingStatistic { method: ScoreMethod, what: &'static str },
    #[error("covariance is singular after regularization")]
    SingularCovariance,
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("need at least {MIN_CALIBRATION_SCORES} ID scores, got {0}")]
    TooFewScores(usize),
    #[error("non-finite score at index {0}")]
    NonFinite(usize),
    #[error(transparent)]
    HyperNet(#[from] HyperNetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScoreMethod {
    Msp,
    MaxLogit,
    Energy,
    Gen,
    Mahalanobis,
    Knn,
    React,
    Ash,
    Vim,
}

impl ScoreMethod {
    pub const ALL: [ScoreMethod; 9] = [
        ScoreMethod::Msp,
        ScoreMethod::MaxLogit,
        ScoreMethod::Energy,
        ScoreMethod::Gen,
        ScoreMethod::Mahalanobis,
        ScoreMethod::Knn,
        ScoreMethod::React,
        ScoreMethod::Ash,
        ScoreMethod::Vim,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScoreMethod::Msp => "msp",
            ScoreMethod::MaxLogit => "maxlogit",
            ScoreMethod::Energy => "energy",
            ScoreMethod::Gen => "gen",
            ScoreMethod::Mahalanobis => "mahalanobis",
            ScoreMethod::Knn => "knn",
            ScoreMethod::React => "react",
            ScoreMethod::Ash => "ash",
            ScoreMethod::Vim => "vim",
        }
    }

    /// Parses a comma-separated list such as `energy,msp,knn`.
    pub fn parse_list(s: &str) -> Result<Vec<ScoreMethod>, ScoreError> {
        s.split(',').map(|m| m.trim().parse()).collect()
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreMethod {
    type Err = ScoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        ScoreMethod::ALL
            .into_iter()
            .find(|m| m.name() == lower)
            .ok_or_else(|| ScoreError::UnknownMethod(s.to_string()))
    }
}

/// Per-method knobs. `None` picks the size-dependent default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreParams {
    pub temperature: f64,
    pub gen_gamma: f64,
    pub gen_top_m: Option<usize>,
    pub knn_k: usize,
    pub react_percentile: f64,
    pub ash_percentile: f64,
    pub vim_dim: Option<usize>,
}

impl Default for ScoreParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            gen_gamma: 0.1,
            gen_top_m: None,
            knn_k: 10,
            react_percentile: 90.0,
            ash_percentile: 90.0,
            vim_dim: None,
        }
    }
}

impl ScoreParams {
    pub fn validate(&self) -> Result<(), ScoreError> {
        let bad = |name, value| Err(ScoreError::BadParameter { name, value });
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature", self.temperature);
        }
        if !(self.gen_gamma > 0.0 && self.gen_gamma.is_finite()) {
            return bad("gen_gamma", self.gen_gamma);
        }
        if self.gen_top_m == Some(0) {
            return bad("gen_top_m", 0.0);
        }
        if self.knn_k == 0 {
            return bad("knn_k", 0.0);
        }
        if !(0.0..=100.0).contains(&self.react_percentile) {
            return bad("react_percentile", self.react_percentile);
        }
        if !(0.0..=100.0).contains(&self.ash_percentile) {
            return bad("ash_percentile", self.ash_percentile);
        }
        if self.vim_dim == Some(0) {
            return bad("vim_dim", 0.0);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VimStatistics {
    pub mean: Vec<f64>,
    /// Orthonormal basis of the residual subspace, one vector per row.
    pub residual_basis: Vec<Vec<f64>>,
    pub alpha: f64,
}

/// Statistics fitted on ID training features under a fixed classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct IdStatistics {
    pub theta: GeneratedParams,
    pub params: ScoreParams,
    pub class_means: Vec<Vec<f64>>,
    /// Row-major `F x F` inverse of the regularized pooled covariance;
    /// absent when some class has fewer than two samples.
    pub precision: Option<Vec<f64>>,
    pub bank: Vec<Vec<f64>>,
    pub react_threshold: f64,
    pub vim: Option<VimStatistics>,
}

pub fn logsumexp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = logsumexp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

/// Linear-interpolated percentile of unsorted data (numpy's default rule).
pub fn percentile(data: &[f64], p: f64) -> f64 {
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn unit(x: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        x.to_vec()
    } else {
        x.iter().map(|v| v / norm).collect()
    }
}

pub fn fit_statistics(
    train: &FeatureDataset,
    theta: &GeneratedParams,
    params: ScoreParams,
) -> Result<IdStatistics, ScoreError> {
    let mut xs = Vec::with_capacity(train.len());
    let mut ys = Vec::with_capacity(train.len());
    for s in train.samples() {
        if let Some(c) = s.label.class() {
            xs.push(s.feature.to_f64());
            ys.push(c);
        }
    }
    IdStatistics::fit(&xs, &ys, train.num_classes(), theta, params)
}

impl IdStatistics {
    pub fn fit(
        xs: &[Vec<f64>],
        labels: &[usize],
        num_classes: usize,
        theta: &GeneratedParams,
        params: ScoreParams,
    ) -> Result<Self, ScoreError> {
        params.validate()?;
        let f = theta.features();
        if xs.len() != labels.len() {
            return Err(ScoreError::Dimension("features and labels differ in length".into()));
        }
        if num_classes != theta.classes() {
            return Err(ScoreError::Dimension(format!(
                "dataset has {num_classes} classes, classifier {}",
                theta.classes()
            )));
        }
        if let Some(x) = xs.iter().find(|x| x.len() != f) {
            return Err(ScoreError::Dimension(format!("feature of width {} for F = {f}", x.len())));
        }

        let mut counts = vec![0usize; num_classes];
        let mut class_means = vec![vec![0.0; f]; num_classes];
        for (x, &y) in xs.iter().zip(labels) {
            if y >= num_classes {
                return Err(ScoreError::Dimension(format!("label {y} >= {num_classes}")));
            }
            counts[y] += 1;
            class_means[y].iter_mut().zip(x).for_each(|(m, v)| *m += v);
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(ScoreError::EmptyClass(c));
        }
        for (m, &n) in class_means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n as f64);
        }

        let precision = if counts.iter().all(|&n| n >= 2) {
            let mut cov = DMatrix::<f64>::zeros(f, f);
            for (x, &y) in xs.iter().zip(labels) {
                let d = DVector::from_iterator(f, x.iter().zip(&class_means[y]).map(|(a, b)| a - b));
                cov += &d * d.transpose();
            }
            cov /= xs.len() as f64;
            cov += DMatrix::identity(f, f) * COVARIANCE_RIDGE;
            let inv = cov.cholesky().ok_or(ScoreError::SingularCovariance)?.inverse();
            Some(inv.transpose().as_slice().to_vec())
        } else {
            None
        };

        let bank = xs.iter().map(|x| unit(x)).collect();
        let all: Vec<f64> = xs.iter().flatten().copied().collect();
        let react_threshold = percentile(&all, params.react_percentile);
        let vim = if f >= 2 {
            Some(fit_vim(xs, theta, params.vim_dim.unwrap_or(8.min(f - 1)))?)
        } else {
            None
        };

        Ok(Self {
            theta: theta.clone(),
            params,
            class_means,
            precision,
            bank,
            react_threshold,
            vim,
        })
    }

    pub fn score(&self, method: ScoreMethod, x: &[f64]) -> Result<f64, ScoreError> {
        let logits = classifier_forward(&self.theta, x)?;
        self.score_with_logits(method, x, &logits)
    }

    pub fn score_with_logits(&self, method: ScoreMethod, x: &[f64], logits: &[f64]) -> Result<f64, ScoreError> {
        let p = &self.params;
        if logits.len() != self.theta.classes() || x.len() != self.theta.features() {
            return Err(ScoreError::Dimension(format!(
                "got {} logits and {} features, expected {} and {}",
                logits.len(),
                x.len(),
                self.theta.classes(),
                self.theta.features()
            )));
        }
        Ok(match method {
            ScoreMethod::Msp => msp(logits),
            ScoreMethod::MaxLogit => max_logit(logits),
            ScoreMethod::Energy => energy(logits, p.temperature),
            ScoreMethod::Gen => gen(logits, p.gen_gamma, p.gen_top_m.unwrap_or(10.min(logits.len()))),
            ScoreMethod::Mahalanobis => {
                let prec = self.precision.as_ref().ok_or(ScoreError::MissingStatistic {
                    method,
                    what: "a covariance (>= 2 samples per class)",
                })?;
                mahalanobis(prec, &self.class_means, x)
            }
            ScoreMethod::Knn => knn(&self.bank, p.knn_k, x),
            ScoreMethod::React => {
                let clipped: Vec<f64> = x.iter().map(|v| v.min(self.react_threshold)).collect();
                energy(&classifier_forward(&self.theta, &clipped)?, p.temperature)
            }
            ScoreMethod::Ash => energy(&classifier_forward(&self.theta, &ash_prune(x, p.ash_percentile))?, p.temperature),
            ScoreMethod::Vim => {
                let vim = self.vim.as_ref().ok_or(ScoreError::MissingStatistic {
                    method,
                    what: "a principal subspace (F >= 2)",
                })?;
                logsumexp(logits) - vim.alpha * residual_norm(vim, x)
            }
        })
    }

    /// Scores every row, in input order.
    pub fn score_all(&self, method: ScoreMethod, xs: &[Vec<f64>]) -> Result<Vec<f64>, ScoreError> {
        xs.par_iter().map(|x| self.score(method, x)).collect()
    }
}

fn fit_vim(xs: &[Vec<f64>], theta: &GeneratedParams, dim: usize) -> Result<VimStatistics, ScoreError> {
    let f = theta.features();
    if dim >= f {
        return Err(ScoreError::BadParameter {
            name: "vim_dim",
            value: dim as f64,
        });
    }
    let n = xs.len() as f64;
    let mut mean = vec![0.0; f];
    for x in xs {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n);
    }
    let mut cov = DMatrix::<f64>::zeros(f, f);
    for x in xs {
        let d = DVector::from_iterator(f, x.iter().zip(&mean).map(|(a, b)| a - b));
        cov += &d * d.transpose();
    }
    cov /= n;
    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let residual_basis: Vec<Vec<f64>> = order[dim..]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    let mut vim = VimStatistics {
        mean,
        residual_basis,
        alpha: 1.0,
    };
    let mut max_logit_sum = 0.0;
    let mut residual_sum = 0.0;
    for x in xs {
        max_logit_sum += max_logit(&classifier_forward(theta, x)?);
        residual_sum += residual_norm(&vim, x);
    }
    vim.alpha = if residual_sum > 0.0 {
        max_logit_sum / residual_sum
    } else {
        0.0
    };
    Ok(vim)
}

fn residual_norm(vim: &VimStatistics, x: &[f64]) -> f64 {
    let centered: Vec<f64> = x.iter().zip(&vim.mean).map(|(a, b)| a - b).collect();
    vim.residual_basis
        .iter()
        .map(|u| {
            let c: f64 = u.iter().zip(&centered).map(|(a, b)| a * b).sum();
            c * c
        })
        .sum::<f64>()
        .sqrt()
}

pub fn msp(logits: &[f64]) -> f64 {
    softmax(logits).into_iter().fold(f64::NEG_INFINITY, f64::max)
}

pub fn max_logit(logits: &[f64]) -> f64 {
    logits.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn energy(logits: &[f64], temperature: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    temperature * logsumexp(&scaled)
}

pub fn gen(logits: &[f64], gamma: f64, top_m: usize) -> f64 {
    let p = softmax(logits);
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    // 1 - p_i summed from the other classes; subtraction cancels when p_i is near 1
    -order
        .iter()
        .take(top_m)
        .map(|&i| {
            let rest: f64 = p.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, q)| q).sum();
            p[i].powf(gamma) * rest.powf(gamma)
        })
        .sum::<f64>()
}

fn mahalanobis(prec: &[f64], means: &[Vec<f64>], x: &[f64]) -> f64 {
    let f = x.len();
    let mut best = f64::INFINITY;
    for mu in means {
        let d: Vec<f64> = x.iter().zip(mu).map(|(a, b)| a - b).collect();
        let mut q = 0.0;
        for i in 0..f {
            let row: f64 = (0..f).map(|j| prec[i * f + j] * d[j]).sum();
            q += d[i] * row;
        }
        best = best.min(q);
    }
    -best
}

fn knn(bank: &[Vec<f64>], k: usize, x: &[f64]) -> f64 {
    let q = unit(x);
    let mut dists: Vec<f64> = bank
        .iter()
        .map(|b| b.iter().zip(&q).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt())
        .collect();
    let k = k.min(dists.len()).max(1);
    let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
    -*kth
}

/// Zeroes the `floor(F * p / 100)` smallest activations (ties to the lower index).
pub fn ash_prune(x: &[f64], percentile: f64) -> Vec<f64> {
    let drop = ((x.len() as f64) * percentile / 100.0).floor() as usize;
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut out = x.to_vec();
    for &i in &order[..drop.min(x.len())] {
        out[i] = 0.0;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Id,
    Ood,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Id => "ID",
            Decision::Ood => "OOD",
        })
    }
}

/// Largest `tau` with `fraction(scores >= tau) >= tpr`: an order statistic,
/// no interpolation.
pub fn calibrate_threshold(id_scores: &[f64], tpr: f64) -> Result<f64, ScoreError> {
    if id_scores.len() < MIN_CALIBRATION_SCORES {
        return Err(ScoreError::TooFewScores(id_scores.len()));
    }
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(ScoreError::BadParameter { name: "tpr", value: tpr });
    }
    if let Some(i) = id_scores.iter().position(|s| !s.is_finite()) {
        return Err(ScoreError::NonFinite(i));
    }
    let mut sorted = id_scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len() as f64;
    let need = ((tpr * n) - 1e-9 * n).ceil().max(1.0) as usize;
    Ok(sorted[need - 1])
}

/// ID iff `score >= tau`.
pub fn decide(score: f64, tau: f64) -> Decision {
    if score >= tau {
        Decision::Id
    } else {
        Decision::Ood
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: usize,
    pub method: ScoreMethod,
    pub score: f64,
    pub decision: Decision,
}

pub fn write_score_csv<W: Write>(out: &mut W, records: &[ScoreRecord]) -> std::io::Result<()> {
    writeln!(out, "sample_id,method,score,decision")?;
    for r in records {
        writeln!(out, "{},{},{},{}", r.sample_id, r.method, r.score, r.decision)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn logit_score_examples() {
        assert_eq!(msp(&[0.0, 0.0]), 0.5);
        assert!(close(energy(&[1.0, 1.0], 1.0), 1.0 + 2f64.ln(), 1e-15));
        assert_eq!(gen(&[1000.0, 0.0], 0.1, 2), 0.0);
        assert_eq!(max_logit(&[0.5, -2.0, 3.0]), 3.0);
    }

    fn identity_stats(means: Vec<Vec<f64>>, bank: Vec<Vec<f64>>) -> IdStatistics {
        let f = means[0].len();
        let mut prec = vec![0.0; f * f];
        for i in 0..f {
            prec[i * f + i] = 1.0;
        }
        IdStatistics {
            theta: GeneratedParams::zeros(f, means.len()),
            params: ScoreParams {
                knn_k: 1,
                ..Default::default()
            },
            class_means: means,
            precision: Some(prec),
            bank: bank.iter().map(|b| unit(b)).collect(),
            react_threshold: f64::INFINITY,
            vim: None,
        }
    }

    #[test]
    fn distance_score_examples() {
        let stats = identity_stats(
            vec![vec![1.0, 2.0], vec![-3.0, 0.5]],
            vec![vec![3.0, 4.0], vec![-1.0, 0.0]],
        );
        assert_eq!(stats.score(ScoreMethod::Mahalanobis, &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(stats.score(ScoreMethod::Knn, &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(stats.score(ScoreMethod::Knn, &[6.0, 8.0]).unwrap(), 0.0);
        assert!(stats.score(ScoreMethod::Knn, &[0.0, 1.0]).unwrap() < 0.0);
    }

    fn gaussian_classes(seed: u64, f: usize, per_class: usize, centers: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (c, mu) in centers.iter().enumerate() {
            for _ in 0..per_class {
                xs.push((0..f).map(|i| mu[i] + rng.sample::<f64, _>(StandardNormal)).collect());
                ys.push(c);
            }
        }
        (xs, ys)
    }

    fn random_theta(seed: u64, f: usize, k: usize) -> GeneratedParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GeneratedParams::new(
            f,
            k,
            (0..f * k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn fitted_means_and_precision() {
        let centers = vec![vec![1.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]];
        let (xs, ys) = gaussian_classes(1, 3, 500, &centers);
        let stats = IdStatistics::fit(&xs, &ys, 2, &random_theta(2, 3, 2), ScoreParams::default()).unwrap();
        for (m, c) in stats.class_means.iter().zip(&centers) {
            for (a, b) in m.iter().zip(c) {
                assert!((a - b).abs() < 0.2);
            }
        }
        let p = DMatrix::from_row_slice(3, 3, stats.precision.as_ref().unwrap());
        let diff = p - DMatrix::<f64>::identity(3, 3);
        let spectral = diff.singular_values().max();
        assert!(spectral < 0.1, "spectral distance {spectral}");
        let inv = DMatrix::from_row_slice(3, 3, stats.precision.as_ref().unwrap());
        assert!((inv.clone() - inv.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn single_sample_classes_block_mahalanobis() {
        let xs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let stats = IdStatistics::fit(&xs, &[0, 1], 2, &random_theta(3, 2, 2), ScoreParams::default()).unwrap();
        assert!(matches!(
            stats.score(ScoreMethod::Mahalanobis, &[1.0, 1.0]),
            Err(ScoreError::MissingStatistic { .. })
        ));
        assert!(stats.score(ScoreMethod::Energy, &[1.0, 1.0]).is_ok());
        assert!(matches!(
            IdStatistics::fit(&xs, &[0, 0], 2, &random_theta(3, 2, 2), ScoreParams::default()),
            Err(ScoreError::EmptyClass(1))
        ));
    }

    // Independent scalar references for every method.
    fn oracle(method: ScoreMethod, s: &IdStatistics, x: &[f64]) -> f64 {
        let (f, k) = (s.theta.features(), s.theta.classes());
        let lg = |x: &[f64]| -> Vec<f64> {
            (0..k)
                .map(|j| s.theta.b()[j] + (0..f).map(|i| s.theta.w()[i * k + j] * x[i]).sum::<f64>())
                .collect()
        };
        let lse = |l: &[f64]| l.iter().map(|v| v.exp()).sum::<f64>().ln();
        let l = lg(x);
        let probs: Vec<f64> = l.iter().map(|v| v.exp() / l.iter().map(|u| u.exp()).sum::<f64>()).collect();
        match method {
            ScoreMethod::Msp => probs.iter().cloned().fold(0.0, f64::max),
            ScoreMethod::MaxLogit => l.iter().cloned().fold(f64::MIN, f64::max),
            ScoreMethod::Energy => lse(&l),
            ScoreMethod::Gen => {
                let mut p = probs.clone();
                p.sort_by(|a, b| b.partial_cmp(a).unwrap());
                -p[..10.min(k)].iter().map(|q| q.powf(0.1) * (1.0 - q).powf(0.1)).sum::<f64>()
            }
            ScoreMethod::Mahalanobis => {
                let prec = s.precision.as_ref().unwrap();
                let mut best = f64::MAX;
                for mu in &s.class_means {
                    let mut q = 0.0;
                    for i in 0..f {
                        for j in 0..f {
                            q += (x[i] - mu[i]) * prec[i * f + j] * (x[j] - mu[j]);
                        }
                    }
                    best = best.min(q);
                }
                -best
            }
            ScoreMethod::Knn => {
                let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mut d: Vec<f64> = s
                    .bank
                    .iter()
                    .map(|b| (0..f).map(|i| (b[i] - x[i] / n).powi(2)).sum::<f64>().sqrt())
                    .collect();
                d.sort_by(|a, b| a.partial_cmp(b).unwrap());
                -d[s.params.knn_k - 1]
            }
            ScoreMethod::React => {
                let c: Vec<f64> = x.iter().map(|v| if *v > s.react_threshold { s.react_threshold } else { *v }).collect();
                lse(&lg(&c))
            }
            ScoreMethod::Ash => {
                let mut sorted = x.to_vec();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let drop = f * 9 / 10;
                let cut = sorted[drop - 1];
                let c: Vec<f64> = x.iter().map(|v| if *v <= cut { 0.0 } else { *v }).collect();
                lse(&lg(&c))
            }
            ScoreMethod::Vim => {
                let v = s.vim.as_ref().unwrap();
                let mut r2 = 0.0;
                for u in &v.residual_basis {
                    let c: f64 = (0..f).map(|i| u[i] * (x[i] - v.mean[i])).sum();
                    r2 += c * c;
                }
                lse(&l) - v.alpha * r2.sqrt()
            }
        }
    }

    #[test]
    fn every_method_matches_scalar_oracle() {
        let f = 6;
        let centers: Vec<Vec<f64>> = (0..3).map(|c| (0..f).map(|i| if i == c { 3.0 } else { 0.0 }).collect()).collect();
        let (xs, ys) = gaussian_classes(4, f, 40, &centers);
        let stats = IdStatistics::fit(&xs, &ys, 3, &random_theta(5, f, 3), ScoreParams::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            // continuous draws keep ASH's cutoff free of ties
            let x: Vec<f64> = (0..f).map(|_| rng.random_range(-4.0..4.0)).collect();
            for m in ScoreMethod::ALL {
                let got = stats.score(m, &x).unwrap();
                let want = oracle(m, &stats, &x);
                assert!(close(got, want, 1e-6), "{m}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn vim_alpha_balances_max_logit() {
        let f = 5;
        let centers: Vec<Vec<f64>> = (0..2).map(|c| (0..f).map(|i| if i == c { 4.0 } else { 0.0 }).collect()).collect();
        let (xs, ys) = gaussian_classes(7, f, 60, &centers);
        let theta = random_theta(8, f, 2);
        let stats = IdStatistics::fit(&xs, &ys, 2, &theta, ScoreParams::default()).unwrap();
        let vim = stats.vim.as_ref().unwrap();
        assert_eq!(vim.residual_basis.len(), 1);
        let ml: f64 = xs.iter().map(|x| max_logit(&classifier_forward(&theta, x).unwrap())).sum();
        let rn: f64 = xs.iter().map(|x| residual_norm(vim, x)).sum();
        assert!(close(vim.alpha * rn, ml, 1e-9));
    }

    #[test]
    fn react_and_ash_degenerate_to_energy() {
        let f = 4;
        let centers = vec![vec![1.0; 4], vec![-1.0; 4]];
        let (xs, ys) = gaussian_classes(9, f, 30, &centers);
        let theta = random_theta(10, f, 2);
        let mut stats = IdStatistics::fit(
            &xs,
            &ys,
            2,
            &theta,
            ScoreParams {
                ash_percentile: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        stats.react_threshold = f64::INFINITY;
        for x in &xs {
            let e = stats.score(ScoreMethod::Energy, x).unwrap();
            assert_eq!(stats.score(ScoreMethod::React, x).unwrap(), e);
            assert_eq!(stats.score(ScoreMethod::Ash, x).unwrap(), e);
        }
    }

    #[test]
    fn react_threshold_is_interpolated_percentile() {
        let data: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!(close(percentile(&data, 90.0), 9.1, 1e-12));
        assert_eq!(percentile(&data, 0.0), 1.0);
        assert_eq!(percentile(&data, 100.0), 10.0);
    }

    #[test]
    fn calibration_examples() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(calibrate_threshold(&s, 0.95).unwrap(), 6.0);
        assert_eq!(calibrate_threshold(&[2.5; 30], 0.95).unwrap(), 2.5);
        assert_eq!(calibrate_threshold(&s, 1.0).unwrap(), 1.0);
        assert!(matches!(calibrate_threshold(&[], 0.95), Err(ScoreError::TooFewScores(0))));
        assert!(matches!(calibrate_threshold(&s[..19], 0.95), Err(ScoreError::TooFewScores(19))));
    }

    #[test]
    fn calibration_matches_threshold_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(20..200);
            let s: Vec<f64> = (0..n).map(|_| (rng.random_range(0..40) as f64) / 4.0).collect();
            let tpr = rng.random_range(0.5..1.0);
            // scan: the largest candidate keeping the ID pass rate at or above tpr
            let best = s
                .iter()
                .copied()
                .filter(|t| s.iter().filter(|v| *v >= t).count() as f64 >= tpr * n as f64 - 1e-9)
                .fold(f64::MIN, f64::max);
            assert_eq!(calibrate_threshold(&s, tpr).unwrap(), best);
        }
    }

    #[test]
    fn decision_boundary() {
        assert_eq!(decide(1.0, 1.0), Decision::Id);
        assert_eq!(decide(1.0 - 1e-12, 1.0), Decision::Ood);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let (s, t) = (rng.random::<f64>(), rng.random::<f64>());
            assert_eq!(decide(s, t) == Decision::Id, !(s < t));
        }
    }

    #[test]
    fn csv_layout() {
        let mut out = Vec::new();
        write_score_csv(
            &mut out,
            &[ScoreRecord {
                sample_id: 3,
                method: ScoreMethod::Energy,
                score: 1.5,
                decision: Decision::Ood,
            }],
        )
        .unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "sample_id,method,score,decision\n3,energy,1.5,OOD\n");
    }

    #[test]
    fn method_names_parse() {
        assert_eq!(
            ScoreMethod::parse_list("energy,msp,knn").unwrap(),
            vec![ScoreMethod::Energy, ScoreMethod::Msp, ScoreMethod::Knn]
        );
        assert!(ScoreMethod::parse_list("energy,odin").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn logits() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-20.0f64..20.0, 2..10)
        }

        fn ranks(v: &[f64]) -> Vec<usize> {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
            idx
        }

        proptest! {
            #[test]
            fn shift_preserves_rankings(batch in prop::collection::vec(logits().prop_map(|mut l| { l.truncate(4); l.resize(4, 0.0); l }), 2..12), shift in -50.0f64..50.0) {
                let shifted: Vec<Vec<f64>> = batch.iter().map(|l| l.iter().map(|v| v + shift).collect()).collect();
                let fns: [fn(&[f64]) -> f64; 4] = [msp, max_logit, |l| energy(l, 1.0), |l| gen(l, 0.1, 4)];
                for (i, f) in fns.iter().enumerate() {
                    let a: Vec<f64> = batch.iter().map(|l| f(l)).collect();
                    let b: Vec<f64> = shifted.iter().map(|l| f(l)).collect();
                    if i == 0 || i == 3 {
                        for (x, y) in a.iter().zip(&b) {
                            prop_assert!((x - y).abs() < 1e-9);
                        }
                    } else {
                        // values near-equal within rounding may legitimately swap
                        let ra = ranks(&a);
                        for w in ra.windows(2) {
                            if a[w[1]] - a[w[0]] > 1e-9 {
                                prop_assert!(b[w[1]] >= b[w[0]]);
                            }
                        }
                    }
                }
            }

            #[test]
            fn raising_max_logit_is_monotone(mut l in logits(), bump in 0.0f64..10.0) {
                let before = [msp(&l), max_logit(&l), energy(&l, 1.0)];
                let i = (0..l.len()).max_by(|&a, &b| l[a].total_cmp(&l[b])).unwrap();
                l[i] += bump;
                let after = [msp(&l), max_logit(&l), energy(&l, 1.0)];
                for (a, b) in before.iter().zip(&after) {
                    prop_assert!(b >= a);
                }
            }
        }
    }
}
