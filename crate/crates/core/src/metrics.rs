//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub count: usize,
    pub accuracy: f64,
    /// Mean F1 over the classes present in the ground truth.
    pub macro_f1: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class_f1: Vec<Option<f64>>,
}

pub fn classification_metrics(labels: &[usize], predictions: &[usize], num_classes: usize) -> Result<EvalMetrics> {
    if labels.is_empty() {
        return Err(Error::EmptyEval);
    }
    if labels.len() != predictions.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            got: predictions.len(),
        });
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    let mut correct = 0;
    for (&y, &p) in labels.iter().zip(predictions) {
        for index in [y, p] {
            if index >= num_classes {
                return Err(Error::LabelOutOfRange { index, num_classes });
            }
        }
        if y == p {
            tp[y] += 1;
            correct += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let per_class_f1: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let support = tp[c] + fn_[c];
            (support > 0).then(|| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_f1.iter().flatten().copied().collect();
    Ok(EvalMetrics {
        count: labels.len(),
        accuracy: correct as f64 / labels.len() as f64,
        macro_f1: present.iter().sum::<f64>() / present.len() as f64,
        per_class_f1,
    })
}
