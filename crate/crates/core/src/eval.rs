//! Per-source binary metrics with fake as the positive class.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, NewsRecord};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Confusion {
    pub fn add(&mut self, gold: Label, predicted: Label) {
        match (gold, predicted) {
            (Label::Fake, Label::Fake) => self.tp += 1,
            (Label::Real, Label::Fake) => self.fp += 1,
            (Label::Real, Label::Real) => self.tn += 1,
            (Label::Fake, Label::Real) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall; 0 when both are 0.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn metrics(&self) -> Metrics {
        Metrics {
            acc: self.accuracy(),
            prec: self.precision(),
            rec: self.recall(),
            f1: self.f1(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub prec: f64,
    pub rec: f64,
    pub f1: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("test record {0:?} has no gold label")]
    MissingGold(String),
    #[error("no prediction for test record {0:?}")]
    MissingPrediction(String),
}

/// Metrics per source tag at threshold 0.5 on p(fake).
pub fn evaluate(
    test: &[NewsRecord],
    p_fake: &BTreeMap<String, f64>,
) -> Result<BTreeMap<String, Metrics>, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let mut per: BTreeMap<String, Confusion> = BTreeMap::new();
    for r in test {
        let gold = r.gold_label.ok_or_else(|| EvalError::MissingGold(r.id.clone()))?;
        let p = *p_fake
            .get(&r.id)
            .ok_or_else(|| EvalError::MissingPrediction(r.id.clone()))?;
        per.entry(r.source.clone())
            .or_default()
            .add(gold, Label::from_bool(p >= 0.5));
    }
    Ok(per.into_iter().map(|(s, c)| (s, c.metrics())).collect())
}

/// Unweighted mean F1 over sources; 0 for an empty map.
pub fn macro_f1(per_source: &BTreeMap<String, Metrics>) -> f64 {
    if per_source.is_empty() {
        return 0.0;
    }
    per_source.values().map(|m| m.f1).sum::<f64>() / per_source.len() as f64
}
