//! The pseudo-label gate: threshold state, teacher statistics and the
//! complementary label library, driven one observation at a time.
//!
//! The trainer and the audit replay both go through [`Gate`], so replaying a
//! run's recorded probabilities reproduces its thresholds exactly.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::datamodel::{ProbabilityVector, PseudoLabel};
use crate::dta::{accept_pseudo_label, finalize_thresholds, ClassConfidenceAccumulator, DtaConfig, ThresholdState};
use crate::error::{Error, Result};
use crate::snl::{extract_complementary, ComplementaryLabelStore, SnlConfig};

/// What the gate decided for one unlabeled sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Route {
    Accepted(PseudoLabel),
    /// `negatives` is the sample's full accumulated complementary set.
    Rejected {
        pseudo: PseudoLabel,
        negatives: BTreeSet<usize>,
    },
}

/// Per-epoch gate bookkeeping, logged by the trainer and emitted by the
/// audit tool in the same shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochGateSummary {
    pub epoch: usize,
    /// Thresholds after this epoch's update.
    pub thresholds: Vec<f64>,
    pub accepted_per_class: Vec<usize>,
    pub rejected: usize,
    pub new_negatives: usize,
    pub library_size: usize,
    pub library_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    dta: DtaConfig,
    snl: SnlConfig,
    thresholds: ThresholdState,
    acc: ClassConfidenceAccumulator,
    store: ComplementaryLabelStore,
    accepted_per_class: Vec<usize>,
    rejected: usize,
    new_negatives: usize,
}

impl Gate {
    pub fn new(num_classes: usize, dta: DtaConfig, snl: SnlConfig) -> Result<Self> {
        let thresholds = ThresholdState::new(num_classes, dta.tau_init, dta.mu)?;
        Ok(Self {
            thresholds,
            acc: ClassConfidenceAccumulator::new(num_classes),
            store: ComplementaryLabelStore::new(num_classes),
            accepted_per_class: vec![0; num_classes],
            rejected: 0,
            new_negatives: 0,
            dta,
            snl,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.thresholds.num_classes()
    }

    pub fn thresholds(&self) -> &ThresholdState {
        &self.thresholds
    }

    /// Overrides every class threshold (used for gate-closed/open checks).
    pub fn set_thresholds(&mut self, tau: Vec<f64>) -> Result<()> {
        if tau.len() != self.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes(),
                got: tau.len(),
            });
        }
        self.thresholds.overwrite(tau)
    }

    pub fn store(&self) -> &ComplementaryLabelStore {
        &self.store
    }

    pub fn accumulator(&self) -> &ClassConfidenceAccumulator {
        &self.acc
    }

    pub fn dta_config(&self) -> &DtaConfig {
        &self.dta
    }

    pub fn snl_config(&self) -> &SnlConfig {
        &self.snl
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.thresholds.epoch()
    }

    /// Gates one averaged weak-view distribution; rejected samples feed the
    /// complementary label library when negative learning is enabled.
    pub fn route(&mut self, sample_id: &str, p_avg: &ProbabilityVector) -> Result<Route> {
        if p_avg.num_classes() != self.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: self.num_classes(),
                got: p_avg.num_classes(),
            });
        }
        let pseudo = accept_pseudo_label(sample_id, p_avg, &self.thresholds);
        if pseudo.accepted {
            self.accepted_per_class[pseudo.class_index] += 1;
            return Ok(Route::Accepted(pseudo));
        }
        self.rejected += 1;
        if !self.snl.enabled {
            return Ok(Route::Rejected {
                pseudo,
                negatives: BTreeSet::new(),
            });
        }
        let already = self.store.negatives(sample_id);
        let mut fresh = extract_complementary(p_avg, &already, self.snl.delta);
        if let Some(max) = self.snl.max_negatives_per_visit {
            fresh.truncate(max);
        }
        self.new_negatives += self.store.update(sample_id, &fresh)?;
        Ok(Route::Rejected {
            pseudo,
            negatives: self.store.negatives(sample_id),
        })
    }

    /// Records one teacher prediction on a labeled sample.
    pub fn observe_labeled(&mut self, teacher_probs: &ProbabilityVector, label: usize) -> Result<()> {
        self.acc.observe(teacher_probs, label)
    }

    /// Updates thresholds (unless dynamic thresholds are disabled), resets
    /// the epoch counters and reports the epoch.
    pub fn end_epoch(&mut self) -> EpochGateSummary {
        if self.dta.enabled {
            finalize_thresholds(&mut self.thresholds, &mut self.acc);
        } else {
            self.acc = ClassConfidenceAccumulator::new(self.num_classes());
            self.thresholds.carry_forward();
        }
        let k = self.num_classes();
        EpochGateSummary {
            epoch: self.thresholds.epoch(),
            thresholds: self.thresholds.thresholds().to_vec(),
            accepted_per_class: std::mem::replace(&mut self.accepted_per_class, vec![0; k]),
            rejected: std::mem::take(&mut self.rejected),
            new_negatives: std::mem::take(&mut self.new_negatives),
            library_size: self.store.total_negatives(),
            library_samples: self.store.num_samples(),
        }
    }
}
