//! Selective negative learning.
//!
//! Samples rejected by the threshold gate still tell us which classes they
//! are *not*: every class whose averaged weak-view probability is at most
//! `delta` becomes a complementary label. Labels accumulate per sample in a
//! persistent library and drive a loss that pushes those probabilities down.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::datamodel::ProbabilityVector;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnlConfig {
    pub enabled: bool,
    pub delta: f64,
    /// Use `-sum log(1 - p_c)` instead of the linear `-sum (1 - p_c)`.
    pub log_form: bool,
    pub max_negatives_per_visit: Option<usize>,
}

impl Default for SnlConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            delta: 0.05,
            log_form: false,
            max_negatives_per_visit: None,
        }
    }
}

impl SnlConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.delta.is_finite() && (0.0..1.0).contains(&self.delta) {
            Ok(())
        } else {
            Err(format!("snl.delta = {} outside [0, 1)", self.delta))
        }
    }
}

/// Repeatedly takes the smallest remaining probability while it is at most
/// `delta`, never touching classes in `already_negated` and always leaving
/// at least one class unnegated. Returns new classes in selection order.
pub fn extract_complementary(p: &ProbabilityVector, already_negated: &BTreeSet<usize>, delta: f64) -> Vec<usize> {
    let k = p.num_classes();
    let mut masked: Vec<bool> = (0..k).map(|c| already_negated.contains(&c)).collect();
    let mut remaining = masked.iter().filter(|m| !**m).count();
    let mut selected = Vec::new();
    while remaining > 1 {
        let mut best: Option<usize> = None;
        for c in (0..k).filter(|&c| !masked[c]) {
            if best.map_or(true, |b| p.get(c) < p.get(b)) {
                best = Some(c);
            }
        }
        let c = best.expect("remaining > 1");
        if p.get(c) > delta {
            break;
        }
        masked[c] = true;
        remaining -= 1;
        selected.push(c);
    }
    selected
}

/// Per-sample complementary label library.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplementaryLabelStore {
    num_classes: usize,
    sets: BTreeMap<String, BTreeSet<usize>>,
}

impl ComplementaryLabelStore {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            sets: BTreeMap::new(),
        }
    }

    pub fn get(&self, sample_id: &str) -> Option<&BTreeSet<usize>> {
        self.sets.get(sample_id)
    }

    pub fn negatives(&self, sample_id: &str) -> BTreeSet<usize> {
        self.sets.get(sample_id).cloned().unwrap_or_default()
    }

    pub fn num_samples(&self) -> usize {
        self.sets.values().filter(|s| !s.is_empty()).count()
    }

    pub fn total_negatives(&self) -> usize {
        self.sets.values().map(BTreeSet::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<usize>)> {
        self.sets.iter()
    }

    /// Unions `new_negatives` into the sample's set, in order, stopping at
    /// `C - 1` entries. Returns how many were actually added.
    pub fn update(&mut self, sample_id: &str, new_negatives: &[usize]) -> Result<usize> {
        if let Some(&c) = new_negatives.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::LabelOutOfRange {
                index: c,
                num_classes: self.num_classes,
            });
        }
        if new_negatives.is_empty() {
            return Ok(0);
        }
        let cap = self.num_classes - 1;
        let set = self.sets.entry(sample_id.to_string()).or_default();
        let mut added = 0;
        for &c in new_negatives {
            if set.len() >= cap {
                break;
            }
            if set.insert(c) {
                added += 1;
            }
        }
        Ok(added)
    }
}

pub fn update_store(store: &mut ComplementaryLabelStore, sample_id: &str, new_negatives: &[usize]) -> Result<usize> {
    store.update(sample_id, new_negatives)
}

/// `-sum_{c in negated} (1 - p_c)`.
pub fn negative_learning_loss(p: &ProbabilityVector, negated: &BTreeSet<usize>) -> f64 {
    -negated.iter().map(|&c| 1.0 - p.get(c)).sum::<f64>()
}

/// Smallest value kept inside the log of the log-form loss.
const LOG_FLOOR: f64 = 1e-12;

/// `-sum_{c in negated} log(1 - p_c)`.
pub fn negative_learning_log_loss(p: &ProbabilityVector, negated: &BTreeSet<usize>) -> f64 {
    -negated
        .iter()
        .map(|&c| (1.0 - p.get(c)).max(LOG_FLOOR).ln())
        .sum::<f64>()
}

/// Gradient of the chosen loss form with respect to the probabilities.
pub fn negative_learning_grad(p: &ProbabilityVector, negated: &BTreeSet<usize>, log_form: bool) -> Vec<f64> {
    let mut grad = vec![0.0; p.num_classes()];
    for &c in negated {
        grad[c] = if log_form {
            1.0 / (1.0 - p.get(c)).max(LOG_FLOOR)
        } else {
            1.0
        };
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn extraction_example() {
        let p = pv(&[0.40, 0.30, 0.20, 0.04, 0.03, 0.02, 0.01]);
        assert_eq!(extract_complementary(&p, &BTreeSet::new(), 0.05), vec![6, 5, 4, 3]);
        assert!(extract_complementary(&ProbabilityVector::uniform(7), &BTreeSet::new(), 0.05).is_empty());
        // already negated classes are skipped
        let already: BTreeSet<usize> = [6, 5].into();
        assert_eq!(extract_complementary(&p, &already, 0.05), vec![4, 3]);
    }

    #[test]
    fn extraction_caps_at_c_minus_one() {
        let p = pv(&[0.94, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01]);
        let got = extract_complementary(&p, &BTreeSet::new(), 0.05);
        assert_eq!(got, vec![1, 2, 3, 4, 5, 6]);
        // even with a delta above every entry, one class survives
        let got = extract_complementary(&p, &BTreeSet::new(), 0.99);
        assert_eq!(got.len(), 6);
        assert!(!got.contains(&0));
        let all_but_one: BTreeSet<usize> = (1..7).collect();
        assert!(extract_complementary(&p, &all_but_one, 0.99).is_empty());
    }

    #[test]
    fn store_examples() {
        let mut store = ComplementaryLabelStore::new(7);
        update_store(&mut store, "x", &[6, 5]).unwrap();
        assert_eq!(store.get("x").unwrap(), &BTreeSet::from([5, 6]));
        assert_eq!(update_store(&mut store, "x", &[5]).unwrap(), 0);
        assert_eq!(store.get("x").unwrap().len(), 2);
        update_store(&mut store, "x", &[0, 1, 2, 3]).unwrap();
        assert_eq!(store.get("x").unwrap().len(), 6);
        let full = store.clone();
        assert_eq!(update_store(&mut store, "x", &[4]).unwrap(), 0);
        assert_eq!(store, full);
        assert!(update_store(&mut store, "y", &[7]).is_err());
        assert_eq!(store.total_negatives(), 6);
        assert_eq!(store.num_samples(), 1);
    }

    #[test]
    fn loss_examples() {
        let u = ProbabilityVector::uniform(7);
        assert_eq!(negative_learning_loss(&u, &BTreeSet::new()), 0.0);
        let two: BTreeSet<usize> = [2].into();
        assert!((negative_learning_loss(&u, &two) + 6.0 / 7.0).abs() < 1e-12);
        let p = pv(&[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(negative_learning_loss(&p, &two), -1.0);
        assert_eq!(negative_learning_log_loss(&p, &two), 0.0);
        assert!((negative_learning_log_loss(&u, &two) + (6.0f64 / 7.0).ln()).abs() < 1e-12);
    }

    fn simplex(n: usize) -> impl Strategy<Value = ProbabilityVector> {
        prop::collection::vec(0.0f64..1.0, n).prop_filter_map("degenerate", |w| {
            let s: f64 = w.iter().sum();
            (s > 1e-9).then(|| pv(&w.iter().map(|x| x / s).collect::<Vec<_>>()))
        })
    }

    proptest! {
        #[test]
        fn adding_a_negative_never_raises_the_loss(p in simplex(7), set in prop::collection::btree_set(0usize..7, 0..6), extra in 0usize..7) {
            let before = negative_learning_loss(&p, &set);
            let mut bigger = set.clone();
            bigger.insert(extra);
            if p.get(extra) < 1.0 {
                prop_assert!(negative_learning_loss(&p, &bigger) <= before);
            }
        }

        #[test]
        fn selections_are_sound(p in simplex(7), delta in 0.0f64..0.3) {
            let got = extract_complementary(&p, &BTreeSet::new(), delta);
            prop_assert!(got.len() <= 6);
            for &c in &got {
                prop_assert!(p.get(c) <= delta);
            }
            if p.max() > delta {
                prop_assert!(!got.contains(&p.argmax()));
            }
        }
    }
}
