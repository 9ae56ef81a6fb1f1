//! Dynamic threshold adjustment.
//!
//! The EMA teacher scores labeled samples; for every class the mean
//! confidence of the teacher's *correct* predictions becomes that epoch's
//! fresh threshold, which is then smoothed into the running per-class
//! threshold: `tau_t = mu * tau_{t-1} + (1 - mu) * fresh`.

use serde::{Deserialize, Serialize};

use crate::datamodel::{argmax_class, ProbabilityVector, PseudoLabel};
use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DtaConfig {
    /// When false the thresholds stay at `tau_init` for the whole run.
    pub enabled: bool,
    pub mu: f64,
    pub tau_init: f64,
    pub ema_decay: f64,
    /// Gather statistics with a full teacher pass over the labeled split at
    /// each epoch end instead of from the step batches.
    pub full_pass_stats: bool,
}

impl Default for DtaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            mu: 0.9,
            tau_init: 0.8,
            ema_decay: 0.999,
            full_pass_stats: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState {
    tau: Vec<f64>,
    epoch: usize,
    mu: f64,
}

impl ThresholdState {
    pub fn new(num_classes: usize, tau_init: f64, mu: f64) -> Result<Self> {
        Self::from_thresholds(vec![tau_init; num_classes], mu)
    }

    pub fn from_thresholds(tau: Vec<f64>, mu: f64) -> Result<Self> {
        if let Some(t) = tau.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::Config(vec![format!("threshold {t} outside [0, 1]")]));
        }
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::Config(vec![format!("dta.mu = {mu} outside [0, 1]")]));
        }
        Ok(Self { tau, epoch: 0, mu })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.tau
    }

    pub fn threshold(&self, class: usize) -> f64 {
        self.tau[class]
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn num_classes(&self) -> usize {
        self.tau.len()
    }

    /// Advances the epoch without touching the thresholds.
    pub(crate) fn carry_forward(&mut self) {
        self.epoch += 1;
    }

    pub(crate) fn overwrite(&mut self, tau: Vec<f64>) -> Result<()> {
        let replacement = Self::from_thresholds(tau, self.mu)?;
        self.tau = replacement.tau;
        Ok(())
    }
}

/// Per-class running sums over correctly predicted labeled samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassConfidenceAccumulator {
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl ClassConfidenceAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            sums: vec![0.0; num_classes],
            counts: vec![0; num_classes],
        }
    }

    pub fn count(&self, class: usize) -> u64 {
        self.counts[class]
    }

    pub fn sum(&self, class: usize) -> f64 {
        self.sums[class]
    }

    pub fn mean(&self, class: usize) -> Option<f64> {
        (self.counts[class] > 0).then(|| self.sums[class] / self.counts[class] as f64)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().all(|&c| c == 0)
    }

    fn reset(&mut self) {
        self.sums.fill(0.0);
        self.counts.fill(0);
    }

    /// Adds one teacher prediction; ignored unless the prediction is correct.
    pub fn observe(&mut self, probs: &ProbabilityVector, label: usize) -> Result<()> {
        let k = self.sums.len();
        if probs.num_classes() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: probs.num_classes(),
            });
        }
        if label >= k {
            return Err(Error::LabelOutOfRange {
                index: label,
                num_classes: k,
            });
        }
        if argmax_class(probs) == label {
            self.sums[label] += probs.get(label);
            self.counts[label] += 1;
        }
        Ok(())
    }
}

/// Folds a batch of teacher predictions on labeled samples into `acc`.
/// The batch is validated before anything is added.
pub fn collect_class_confidences(
    acc: &mut ClassConfidenceAccumulator,
    teacher_probs: &[ProbabilityVector],
    labels: &[usize],
) -> Result<()> {
    if teacher_probs.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: teacher_probs.len(),
            got: labels.len(),
        });
    }
    let k = acc.sums.len();
    for (p, &y) in teacher_probs.iter().zip(labels) {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                index: y,
                num_classes: k,
            });
        }
        if p.num_classes() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: p.num_classes(),
            });
        }
    }
    for (p, &y) in teacher_probs.iter().zip(labels) {
        acc.observe(p, y)?;
    }
    Ok(())
}

/// Closes an epoch: smooths every class that saw a correct prediction,
/// carries the rest forward, advances the epoch and clears `acc`.
pub fn finalize_thresholds(state: &mut ThresholdState, acc: &mut ClassConfidenceAccumulator) {
    for (c, tau) in state.tau.iter_mut().enumerate() {
        if let Some(fresh) = acc.mean(c) {
            *tau = state.mu * *tau + (1.0 - state.mu) * fresh;
        }
    }
    state.epoch += 1;
    acc.reset();
}

/// Accepted iff the top probability strictly exceeds its class threshold.
pub fn accept_pseudo_label(sample_id: &str, p_avg: &ProbabilityVector, state: &ThresholdState) -> PseudoLabel {
    let class_index = argmax_class(p_avg);
    let confidence = p_avg.get(class_index);
    PseudoLabel {
        sample_id: sample_id.to_string(),
        class_index,
        confidence,
        accepted: confidence > state.threshold(class_index),
    }
}

/// Shadow copy of the student updated only by exponential moving average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherParams<T> {
    pub params: Vec<T>,
    pub decay: f64,
}

impl<T: Real> TeacherParams<T> {
    pub fn from_student(student: &[T], decay: f64) -> Self {
        Self {
            params: student.to_vec(),
            decay,
        }
    }

    pub fn update(&mut self, student: &[T]) -> Result<()> {
        ema_update(&mut self.params, student, self.decay)
    }
}

/// `teacher <- decay * teacher + (1 - decay) * student`, elementwise.
pub fn ema_update<T: Real>(teacher: &mut [T], student: &[T], decay: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::DimensionMismatch {
            expected: teacher.len(),
            got: student.len(),
        });
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::Config(vec![format!("dta.ema_decay = {decay} outside [0, 1]")]));
    }
    let d = T::from_f64(decay);
    let rest = T::from_f64(1.0 - decay);
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = d * *t + rest * s;
    }
    Ok(())
}
