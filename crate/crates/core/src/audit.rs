//! Probability traces and their offline replay.
//!
//! A trace lists, in the order the trainer consumed them, every averaged
//! weak-view distribution of an unlabeled sample (no label) and every
//! teacher distribution of a labeled sample (with label). Replaying it
//! through [`Gate`] reproduces the run's thresholds, acceptance counts and
//! complementary label library.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::datamodel::ProbabilityVector;
use crate::dta::DtaConfig;
use crate::error::{Error, Result};
use crate::gate::{EpochGateSummary, Gate};
use crate::snl::SnlConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbTrace {
    /// 1-based epoch the record belongs to.
    pub epoch: usize,
    pub sample_id: String,
    pub probs: ProbabilityVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

pub fn read_trace<R: BufRead>(reader: R) -> Result<Vec<ProbTrace>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::io("reading trace"))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Trace(format!("line {}: {e}", i + 1)))?;
        out.push(record);
    }
    Ok(out)
}

/// Replays `trace` and returns one summary per epoch, closing an epoch
/// whenever the epoch number advances and after the last record. Epochs
/// with no records are closed empty.
pub fn run_audit(trace: &[ProbTrace], num_classes: usize, dta: &DtaConfig, snl: &SnlConfig) -> Result<Vec<EpochGateSummary>> {
    let mut gate = Gate::new(num_classes, dta.clone(), snl.clone())?;
    let mut summaries = Vec::new();
    for (i, record) in trace.iter().enumerate() {
        if record.epoch == 0 {
            return Err(Error::Trace(format!("record {}: epochs start at 1", i + 1)));
        }
        if record.epoch <= gate.epoch() {
            return Err(Error::Trace(format!(
                "record {}: epoch {} after epoch {} was closed",
                i + 1,
                record.epoch,
                gate.epoch()
            )));
        }
        while gate.epoch() + 1 < record.epoch {
            summaries.push(gate.end_epoch());
        }
        match record.label {
            Some(label) => gate.observe_labeled(&record.probs, label)?,
            None => {
                gate.route(&record.sample_id, &record.probs)?;
            }
        }
    }
    if !trace.is_empty() {
        summaries.push(gate.end_epoch());
    }
    Ok(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(epoch: usize, id: &str, probs: &[f64], label: Option<usize>) -> ProbTrace {
        ProbTrace {
            epoch,
            sample_id: id.into(),
            probs: ProbabilityVector::new(probs.to_vec()).unwrap(),
            label,
        }
    }

    #[test]
    fn constant_trace_converges_geometrically() {
        let p = [0.95, 0.05];
        let trace: Vec<_> = (1..=20).map(|e| rec(e, "l", &p, Some(0))).collect();
        let dta = DtaConfig::default();
        let out = run_audit(&trace, 2, &dta, &SnlConfig::default()).unwrap();
        assert_eq!(out.len(), 20);
        for (k, s) in out.iter().enumerate() {
            let expected = 0.95 + (0.8 - 0.95) * dta.mu.powi(k as i32 + 1);
            assert!((s.thresholds[0] - expected).abs() < 1e-12);
            assert_eq!(s.thresholds[1], 0.8);
        }
    }

    #[test]
    fn closed_gate_grows_library_only_below_delta() {
        let trace = vec![
            rec(1, "a", &[0.5, 0.3, 0.2], None),
            rec(1, "b", &[0.6, 0.38, 0.02], None),
        ];
        let out = run_audit(&trace, 3, &DtaConfig::default(), &SnlConfig::default()).unwrap();
        assert_eq!(out[0].accepted_per_class, vec![0, 0, 0]);
        assert_eq!(out[0].rejected, 2);
        assert_eq!((out[0].library_size, out[0].library_samples), (1, 1));
    }

    #[test]
    fn gaps_and_order() {
        let trace = vec![rec(1, "a", &[0.5, 0.5], None), rec(3, "a", &[0.5, 0.5], None)];
        let out = run_audit(&trace, 2, &DtaConfig::default(), &SnlConfig::default()).unwrap();
        assert_eq!(out.iter().map(|s| s.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(out[1].rejected, 0);
        let bad = vec![rec(2, "a", &[0.5, 0.5], None), rec(1, "a", &[0.5, 0.5], None)];
        assert!(matches!(
            run_audit(&bad, 2, &DtaConfig::default(), &SnlConfig::default()),
            Err(Error::Trace(_))
        ));
    }

    #[test]
    fn trace_lines_roundtrip() {
        let r = rec(4, "img/1.png", &[0.1, 0.2, 0.7], Some(2));
        let u = rec(4, "img/2.png", &[0.1, 0.2, 0.7], None);
        let text = format!("{}\n{}\n", serde_json::to_string(&r).unwrap(), serde_json::to_string(&u).unwrap());
        assert!(!text.lines().nth(1).unwrap().contains("label"));
        assert_eq!(read_trace(text.as_bytes()).unwrap(), vec![r, u]);
    }
}
