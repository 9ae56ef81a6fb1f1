//! Training objectives and their gradients with respect to logits.

use serde::{Deserialize, Serialize};

use std::collections::BTreeSet;

use crate::datamodel::{ProbabilityVector, PseudoLabel};
use crate::error::{Error, Result};
use crate::snl::{negative_learning_grad, negative_learning_log_loss, negative_learning_loss};

/// Floor applied inside `log` so saturated predictions stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_labeled: f64,
    pub l_consistency: f64,
    pub l_negative: f64,
    pub l_total: f64,
    pub accepted_count: usize,
    pub rejected_count: usize,
}

fn cross_entropy(label: usize, p: &ProbabilityVector) -> f64 {
    -p.get(label).max(LOG_FLOOR).ln()
}

/// Mean cross-entropy of `probs` against hard `labels`.
pub fn supervised_loss(labels: &[usize], probs: &[ProbabilityVector]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != probs.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: probs.len(),
        });
    }
    let mut total = 0.0;
    for (&y, p) in labels.iter().zip(probs) {
        if y >= p.num_classes() {
            return Err(Error::LabelOutOfRange {
                index: y,
                num_classes: p.num_classes(),
            });
        }
        total += cross_entropy(y, p);
    }
    Ok(total / labels.len() as f64)
}

/// Cross-entropy of strong-view predictions against accepted pseudo-labels,
/// averaged over accepted samples only; zero when none is accepted.
pub fn consistency_loss(pseudo_labels: &[PseudoLabel], strong: &[ProbabilityVector]) -> Result<f64> {
    if pseudo_labels.len() != strong.len() {
        return Err(Error::DimensionMismatch {
            expected: pseudo_labels.len(),
            got: strong.len(),
        });
    }
    let mut total = 0.0;
    let mut accepted = 0usize;
    for (pl, p) in pseudo_labels.iter().zip(strong) {
        if pl.accepted {
            total += cross_entropy(pl.class_index, p);
            accepted += 1;
        }
    }
    Ok(if accepted == 0 { 0.0 } else { total / accepted as f64 })
}

/// `l_labeled + lambda1 * l_consistency + lambda2 * l_negative`.
pub fn total_loss(l_labeled: f64, l_consistency: f64, l_negative: f64, weights: &LossWeights) -> Result<f64> {
    for (term, value) in [
        ("l_labeled", l_labeled),
        ("l_consistency", l_consistency),
        ("l_negative", l_negative),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { term, value });
        }
    }
    Ok(l_labeled + weights.lambda1 * l_consistency + weights.lambda2 * l_negative)
}

impl LossReport {
    pub fn assemble(
        l_labeled: f64,
        l_consistency: f64,
        l_negative: f64,
        weights: &LossWeights,
        accepted_count: usize,
        rejected_count: usize,
    ) -> Result<Self> {
        Ok(Self {
            l_total: total_loss(l_labeled, l_consistency, l_negative, weights)?,
            l_labeled,
            l_consistency,
            l_negative,
            accepted_count,
            rejected_count,
        })
    }
}

/// `scale * (softmax - onehot(label))`: the logit gradient of a scaled
/// cross-entropy term.
pub fn cross_entropy_logit_grad(label: usize, p: &ProbabilityVector, scale: f64) -> Vec<f64> {
    p.as_slice()
        .iter()
        .enumerate()
        .map(|(c, &pc)| scale * (pc - if c == label { 1.0 } else { 0.0 }))
        .collect()
}

/// Pulls a gradient with respect to softmax outputs back to the logits.
pub fn softmax_backward(p: &ProbabilityVector, grad_probs: &[f64]) -> Vec<f64> {
    let dot: f64 = p.as_slice().iter().zip(grad_probs).map(|(a, b)| a * b).sum();
    p.as_slice()
        .iter()
        .zip(grad_probs)
        .map(|(&pc, &g)| pc * (g - dot))
        .collect()
}

/// Row-wise softmax of a row-major `n x k` logit matrix.
pub fn softmax_rows(logits: &[f64], k: usize) -> Result<Vec<ProbabilityVector>> {
    logits.chunks(k).map(ProbabilityVector::from_logits).collect()
}

/// Mean cross-entropy of `softmax(logits)` against `targets`, and its
/// gradient with respect to the logits.
pub fn cross_entropy_objective(targets: &[usize], logits: &[f64], k: usize) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() * k {
        return Err(Error::DimensionMismatch {
            expected: targets.len() * k,
            got: logits.len(),
        });
    }
    let probs = softmax_rows(logits, k)?;
    let loss = supervised_loss(targets, &probs)?;
    let scale = 1.0 / targets.len() as f64;
    let grad = targets
        .iter()
        .zip(&probs)
        .flat_map(|(&y, p)| cross_entropy_logit_grad(y, p, scale))
        .collect();
    Ok((loss, grad))
}

/// Negative learning on the average of two weak-view distributions, mean
/// over samples, with gradients for both views' logits.
pub fn negative_objective(
    logits1: &[f64],
    logits2: &[f64],
    negatives: &[BTreeSet<usize>],
    k: usize,
    log_form: bool,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let n = negatives.len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    for got in [logits1.len(), logits2.len()] {
        if got != n * k {
            return Err(Error::DimensionMismatch { expected: n * k, got });
        }
    }
    let p1 = softmax_rows(logits1, k)?;
    let p2 = softmax_rows(logits2, k)?;
    let mut loss = 0.0;
    let mut grad1 = Vec::with_capacity(n * k);
    let mut grad2 = Vec::with_capacity(n * k);
    for ((a, b), neg) in p1.iter().zip(&p2).zip(negatives) {
        let avg = a.average(b)?;
        loss += if log_form {
            negative_learning_log_loss(&avg, neg)
        } else {
            negative_learning_loss(&avg, neg)
        };
        let g: Vec<f64> = negative_learning_grad(&avg, neg, log_form)
            .into_iter()
            .map(|v| 0.5 * v / n as f64)
            .collect();
        grad1.extend(softmax_backward(a, &g));
        grad2.extend(softmax_backward(b, &g));
    }
    Ok((loss / n as f64, grad1, grad2))
}
