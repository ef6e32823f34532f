//! Softmax-regression reference classifier, the frozen model behind the
//! importance value function.

use secdood_core::hypernet::{classifier_forward, GeneratedParams};
use secdood_core::scores::logsumexp;

use crate::TrainError;

/// Cross-entropy of one sample and its gradient with respect to the logits.
pub fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let lse = logsumexp(logits);
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceOptions {
    pub iterations: usize,
    pub lr: f64,
    /// L2 penalty on the weights.
    pub weight_decay: f64,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 0.05,
            weight_decay: 1e-4,
        }
    }
}

/// Full-batch Adam from zero initialization; deterministic.
pub fn train_reference(
    xs: &[Vec<f64>],
    ys: &[usize],
    num_classes: usize,
    opts: ReferenceOptions,
) -> Result<GeneratedParams, TrainError> {
    if xs.is_empty() {
        return Err(TrainError::EmptyDataset("reference training set"));
    }
    let f = xs[0].len();
    let k = num_classes;
    let n = xs.len() as f64;
    let mut w = vec![0.0; f * k];
    let mut b = vec![0.0; k];
    let mut adam = crate::adam::Adam::new(f * k + k, opts.lr);
    for it in 0..opts.iterations {
        let theta = GeneratedParams::new(f, k, w.clone(), b.clone())?;
        let mut gw = vec![0.0; f * k];
        let mut gb = vec![0.0; k];
        let mut loss = 0.0;
        for (x, &y) in xs.iter().zip(ys) {
            let (l, g) = softmax_xent(&classifier_forward(&theta, x)?, y);
            loss += l / n;
            for (i, xi) in x.iter().enumerate() {
                for j in 0..k {
                    gw[i * k + j] += xi * g[j] / n;
                }
            }
            gb.iter_mut().zip(&g).for_each(|(a, gj)| *a += gj / n);
        }
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch: it, batch: 0 });
        }
        gw.iter_mut().zip(&w).for_each(|(g, wi)| *g += opts.weight_decay * wi);
        let mut params: Vec<f64> = w.iter().chain(&b).copied().collect();
        let grads: Vec<f64> = gw.into_iter().chain(gb).collect();
        adam.step(&mut params, &grads);
        b = params.split_off(f * k);
        w = params;
    }
    Ok(GeneratedParams::new(f, k, w, b)?)
}

pub fn accuracy(theta: &GeneratedParams, xs: &[Vec<f64>], ys: &[usize]) -> Result<f64, TrainError> {
    let mut hits = 0usize;
    for (x, &y) in xs.iter().zip(ys) {
        let l = classifier_forward(theta, x)?;
        let pred = (0..l.len()).max_by(|&a, &b| l[a].total_cmp(&l[b]).then(b.cmp(&a))).unwrap_or(0);
        hits += (pred == y) as usize;
    }
    Ok(hits as f64 / xs.len().max(1) as f64)
}
