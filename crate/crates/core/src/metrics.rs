//! Evaluation metrics for joint classification and portion estimation.
//!
//! * accuracy: fraction of records whose predicted class is correct.
//! * MAE: mean absolute portion error, over all records or only the
//!   correctly classified ones (MAE-Correct).
//! * MCCR: `C · Σ_{i∈I} |w̃_i − w̄_i| / |I|²` with `I` the correctly
//!   classified records. Smaller is better.
//! * EP: `Σ |w − ŵ| / Σ ŵ × 100`, an aggregate ratio rather than a mean of
//!   per-item ratios.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub predicted_class: usize,
    pub true_class: usize,
    /// kcal
    pub predicted_portion: f64,
    /// kcal
    pub true_portion: f64,
}

impl EvalRecord {
    pub fn is_correct(&self) -> bool {
        self.predicted_class == self.true_class
    }

    fn abs_error(&self) -> f64 {
        (self.predicted_portion - self.true_portion).abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    All,
    CorrectOnly,
}

pub fn accuracy(records: &[EvalRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("accuracy of an empty record set"));
    }
    let correct = records.iter().filter(|r| r.is_correct()).count();
    Ok(correct as f64 / records.len() as f64)
}

pub fn mae(records: &[EvalRecord], subset: Subset) -> Result<f64> {
    let (sum, n) = records
        .iter()
        .filter(|r| subset == Subset::All || r.is_correct())
        .fold((0.0, 0usize), |(s, n), r| (s + r.abs_error(), n + 1));
    if n == 0 {
        return Err(Error::EmptyInput(match subset {
            Subset::All => "MAE of an empty record set",
            Subset::CorrectOnly => "MAE-Correct with no correctly classified records",
        }));
    }
    Ok(sum / n as f64)
}

/// Evaluated as `C · MAE-Correct / |I|`, so that with `C = 1` it equals
/// MAE-Correct divided by the correct count bit for bit.
pub fn mccr(records: &[EvalRecord], c: f64) -> Result<f64> {
    let n = records.iter().filter(|r| r.is_correct()).count();
    if n == 0 {
        return Err(Error::EmptyInput("MCCR with no correctly classified records"));
    }
    Ok(c * mae(records, Subset::CorrectOnly)? / n as f64)
}

/// Error percentage in `[0, ∞)`, e.g. `50.0` for 50 %.
pub fn error_percentage(records: &[EvalRecord]) -> Result<f64> {
    let truth: f64 = records.iter().map(|r| r.true_portion).sum();
    if !(truth > 0.0) {
        return Err(Error::EmptyInput("error percentage needs a positive total groundtruth portion"));
    }
    let err: f64 = records.iter().map(EvalRecord::abs_error).sum();
    Ok(err / truth * 100.0)
}

/// One evaluation run. Metrics that cannot be computed are `None` with the
/// reason recorded under the field name in `absent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub mae: Option<f64>,
    pub mae_correct: Option<f64>,
    pub mccr: Option<f64>,
    pub ep: Option<f64>,
    pub n_total: usize,
    pub n_correct: usize,
    pub mccr_constant: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub absent: BTreeMap<String, String>,
}

/// Which heads an evaluated model actually has.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskMask {
    pub classification: bool,
    pub portion: bool,
}

impl TaskMask {
    pub const BOTH: TaskMask = TaskMask {
        classification: true,
        portion: true,
    };
}

pub fn build_report(records: &[EvalRecord], c: f64) -> Result<MetricsReport> {
    build_masked_report(records, c, TaskMask::BOTH)
}

/// Like [`build_report`] but leaves the metrics of a missing head absent.
/// MAE-Correct and MCCR need both heads.
pub fn build_masked_report(records: &[EvalRecord], c: f64, mask: TaskMask) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("report over an empty record set"));
    }
    let mut absent = BTreeMap::new();
    let mut keep = |name: &str, enabled: bool, why_disabled: &str, value: Result<f64>| -> Option<f64> {
        if !enabled {
            absent.insert(name.to_string(), why_disabled.to_string());
            return None;
        }
        match value {
            Ok(v) => Some(v),
            Err(e) => {
                absent.insert(name.to_string(), e.to_string());
                None
            }
        }
    };
    let no_cls = "model has no classification head";
    let no_reg = "model has no portion head";
    let joint = "needs both classification and portion heads";
    let both = mask.classification && mask.portion;
    let report = MetricsReport {
        accuracy: keep("accuracy", mask.classification, no_cls, accuracy(records)),
        mae: keep("mae", mask.portion, no_reg, mae(records, Subset::All)),
        mae_correct: keep("mae_correct", both, joint, mae(records, Subset::CorrectOnly)),
        mccr: keep("mccr", both, joint, mccr(records, c)),
        ep: keep("ep", mask.portion, no_reg, error_percentage(records)),
        n_total: records.len(),
        n_correct: if mask.classification {
            records.iter().filter(|r| r.is_correct()).count()
        } else {
            0
        },
        mccr_constant: c,
        absent,
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(p: usize, t: usize, wp: f64, wt: f64) -> EvalRecord {
        EvalRecord {
            predicted_class: p,
            true_class: t,
            predicted_portion: wp,
            true_portion: wt,
        }
    }

    #[test]
    fn accuracy_counts() {
        let all = [rec(1, 1, 0.0, 0.0), rec(2, 2, 0.0, 0.0)];
        assert_eq!(accuracy(&all).unwrap(), 1.0);
        let three = [rec(0, 0, 0.0, 0.0), rec(1, 1, 0.0, 0.0), rec(2, 2, 0.0, 0.0), rec(0, 3, 0.0, 0.0)];
        assert_eq!(accuracy(&three).unwrap(), 0.75);
        assert!(accuracy(&[]).is_err());
    }

    #[test]
    fn mae_hand_values() {
        let r = [rec(0, 0, 100.0, 90.0), rec(0, 0, 200.0, 230.0)];
        assert_eq!(mae(&r, Subset::All).unwrap(), 20.0);
        let perfect = [rec(0, 0, 5.0, 5.0)];
        assert_eq!(mae(&perfect, Subset::All).unwrap(), 0.0);
        let wrong = [rec(1, 0, 5.0, 7.0)];
        assert!(mae(&wrong, Subset::CorrectOnly).is_err());
    }

    #[test]
    fn mccr_hand_values() {
        let r = [rec(3, 3, 10.0, 0.0), rec(4, 4, 0.0, 30.0)];
        assert_eq!(mccr(&r, 1.0).unwrap(), 10.0);
        assert_eq!(mccr(&r, 2.0).unwrap(), 20.0);
        assert_eq!(mccr(&[rec(1, 1, 3.0, 3.0)], 1.0).unwrap(), 0.0);
        assert!(mccr(&[rec(1, 2, 3.0, 3.0)], 1.0).is_err());
    }

    #[test]
    fn error_percentage_hand_values() {
        assert_eq!(error_percentage(&[rec(0, 0, 50.0, 100.0)]).unwrap(), 50.0);
        assert_eq!(error_percentage(&[rec(0, 0, 7.0, 7.0)]).unwrap(), 0.0);
        assert!(error_percentage(&[rec(0, 0, 7.0, 0.0)]).is_err());
    }

    #[test]
    fn perfect_report() {
        let r = [rec(0, 0, 10.0, 10.0), rec(1, 1, 20.0, 20.0)];
        let rep = build_report(&r, 1.0).unwrap();
        assert_eq!(rep.accuracy, Some(1.0));
        assert_eq!(rep.mae, Some(0.0));
        assert_eq!(rep.mccr, Some(0.0));
        assert_eq!(rep.ep, Some(0.0));
        assert_eq!((rep.n_total, rep.n_correct), (2, 2));
    }

    #[test]
    fn absent_fields_carry_reasons() {
        let r = [rec(1, 0, 10.0, 12.0)];
        let rep = build_report(&r, 1.0).unwrap();
        assert_eq!(rep.accuracy, Some(0.0));
        assert!(rep.mae_correct.is_none() && rep.mccr.is_none());
        assert!(rep.absent.contains_key("mccr"));
        let portion_only = build_masked_report(&r, 1.0, TaskMask { classification: false, portion: true }).unwrap();
        assert!(portion_only.accuracy.is_none());
        assert_eq!(portion_only.mae, Some(2.0));
        let json = serde_json::to_value(&portion_only).unwrap();
        assert!(json["accuracy"].is_null());
    }

    fn records() -> impl Strategy<Value = Vec<EvalRecord>> {
        prop::collection::vec(
            (0usize..4, 0usize..4, 0.0f64..1000.0, 0.0f64..1000.0).prop_map(|(p, t, a, b)| rec(p, t, a, b)),
            1..60,
        )
    }

    proptest! {
        #[test]
        fn mae_nonnegative_and_permutation_invariant(mut r in records(), seed in any::<u64>()) {
            let a = mae(&r, Subset::All).unwrap();
            prop_assert!(a >= 0.0);
            let n = r.len();
            r.rotate_left((seed as usize) % n);
            let b = mae(&r, Subset::All).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
        }

        #[test]
        fn accuracy_invariant_under_relabeling(r in records(), shift in 1usize..4) {
            let relabeled: Vec<EvalRecord> = r.iter().map(|x| rec((x.predicted_class + shift) % 4, (x.true_class + shift) % 4, x.predicted_portion, x.true_portion)).collect();
            prop_assert_eq!(accuracy(&r).unwrap(), accuracy(&relabeled).unwrap());
        }

        #[test]
        fn report_counts_are_consistent(r in records()) {
            let rep = build_report(&r, 1.0).unwrap();
            prop_assert!(rep.n_correct <= rep.n_total);
            prop_assert_eq!((rep.accuracy.unwrap() * rep.n_total as f64).round() as usize, rep.n_correct);
        }

        #[test]
        fn ep_scales_with_errors(truth in prop::collection::vec(1.0f64..500.0, 1..20), errs in prop::collection::vec(-50.0f64..50.0, 20), c in 0.5f64..3.0) {
            let base: Vec<EvalRecord> = truth.iter().zip(&errs).map(|(&t, &e)| rec(0, 0, t + e, t)).collect();
            let scaled: Vec<EvalRecord> = truth.iter().zip(&errs).map(|(&t, &e)| rec(0, 0, t + c * e, t)).collect();
            let a = error_percentage(&base).unwrap();
            let b = error_percentage(&scaled).unwrap();
            prop_assert!((b - c * a).abs() <= 1e-9 * b.max(1.0));
        }
    }
}
