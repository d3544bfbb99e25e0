//! Three-class F1 scoring of run outcomes and report rendering.

mod render;

use std::collections::{BTreeMap, HashSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::label::EvalClass;
use crate::pipeline::RunOutcome;

pub use render::{baseline_rows, best_of, render_report, ConfigDescriptor, ReportFormat, ReportRow, Scores};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("no gold label for instance {0:?}")]
    MissingGold(String),
    #[error("instance {0:?} appears more than once")]
    DuplicateOutcome(String),
}

/// How outcomes without a prediction are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnparsablePolicy {
    /// A false negative for the gold class, never a false positive.
    #[default]
    CountAsWrong,
    /// Left out of scoring; still counted in `n_unparsable`.
    Exclude,
}

impl FromStr for UnparsablePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "count-as-wrong" => Ok(UnparsablePolicy::CountAsWrong),
            "exclude" => Ok(UnparsablePolicy::Exclude),
            other => Err(format!("unknown unparsable policy {other:?}")),
        }
    }
}

/// Gold class by predicted class, plus a column for outcomes without a
/// prediction. Indexed with [`EvalClass::index`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
    pub unparsable: [u64; 3],
}

impl ConfusionMatrix {
    pub fn get(&self, gold: EvalClass, predicted: EvalClass) -> u64 {
        self.counts[gold.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.unparsable.iter().sum::<u64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub per_class_f1: BTreeMap<EvalClass, f64>,
    pub confusion: ConfusionMatrix,
    pub n_scored: usize,
    pub n_unparsable: usize,
    pub unparsable_policy: UnparsablePolicy,
    /// Nothing was scored, so every F1 is the 0/0 convention.
    pub degenerate: bool,
}

impl EvalReport {
    pub fn class_f1(&self, class: EvalClass) -> f64 {
        self.per_class_f1.get(&class).copied().unwrap_or(0.0)
    }
}

fn f1(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn compute_report(
    outcomes: &[RunOutcome],
    golds: &BTreeMap<String, EvalClass>,
    policy: UnparsablePolicy,
) -> Result<EvalReport, EvalError> {
    let mut confusion = ConfusionMatrix::default();
    let mut seen = HashSet::with_capacity(outcomes.len());
    for o in outcomes {
        let gold = *golds
            .get(&o.instance_id)
            .ok_or_else(|| EvalError::MissingGold(o.instance_id.clone()))?;
        if !seen.insert(o.instance_id.as_str()) {
            return Err(EvalError::DuplicateOutcome(o.instance_id.clone()));
        }
        match o.predicted {
            Some(p) => confusion.counts[gold.index()][p.to_eval_class().index()] += 1,
            None => confusion.unparsable[gold.index()] += 1,
        }
    }

    let mut per_class_f1 = BTreeMap::new();
    let (mut sum_tp, mut sum_fp, mut sum_fn) = (0u64, 0u64, 0u64);
    for class in EvalClass::ALL {
        let c = class.index();
        let tp = confusion.counts[c][c];
        let fp: u64 = (0..3).filter(|&g| g != c).map(|g| confusion.counts[g][c]).sum();
        let mut fn_: u64 = (0..3).filter(|&p| p != c).map(|p| confusion.counts[c][p]).sum();
        if policy == UnparsablePolicy::CountAsWrong {
            fn_ += confusion.unparsable[c];
        }
        per_class_f1.insert(class, f1(tp, fp, fn_));
        sum_tp += tp;
        sum_fp += fp;
        sum_fn += fn_;
    }

    let n_unparsable = confusion.unparsable.iter().sum::<u64>() as usize;
    let n_scored = confusion.counts.iter().flatten().sum::<u64>() as usize;
    Ok(EvalReport {
        f1_micro: f1(sum_tp, sum_fp, sum_fn),
        f1_macro: per_class_f1.values().sum::<f64>() / 3.0,
        per_class_f1,
        confusion,
        n_scored,
        n_unparsable,
        unparsable_policy: policy,
        degenerate: n_scored == 0,
    })
}
