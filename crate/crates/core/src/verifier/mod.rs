//! Label-error detection with confident learning.
//!
//! Out-of-sample class probabilities come from a cross-validated n-gram
//! probe. Per-class thresholds, the confident joint, and its calibrated
//! normalization estimate how many labels of each class are wrong; that many
//! lowest-self-confidence samples per class are flagged, and the least
//! confident `rho` fraction of them is queued for human review.

pub mod probe;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use probe::{fold_of, ProbeConfig, ProbeModel};

use crate::util::{ceil_tolerant, round_half_up};

#[derive(Debug, Error, PartialEq)]
pub enum VerifierError {
    #[error("class {class} has {count} samples; need at least {needed}")]
    ClassTooSmall {
        class: usize,
        count: usize,
        needed: usize,
    },
    #[error("class {0} has no samples")]
    EmptyClass(usize),
    #[error("inputs differ in length")]
    LengthMismatch,
    #[error("label {label} outside 0..{n_classes}")]
    BadLabel { label: usize, n_classes: usize },
    #[error("rho must lie in [0, 1], got {0}")]
    BadRho(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseReport {
    pub thresholds: Vec<f64>,
    pub confident_joint: Vec<Vec<u64>>,
    pub q_hat: Vec<Vec<f64>>,
    /// Flagged ids, least self-confident first (ties by id).
    pub flagged: Vec<String>,
    /// Self-class probability of each flagged id, aligned with `flagged`.
    pub flagged_self_prob: Vec<f64>,
    /// The first `ceil(rho * |flagged|)` entries of `flagged`.
    pub human_queue: Vec<String>,
}

impl NoiseReport {
    pub fn empty(n_classes: usize) -> Self {
        NoiseReport {
            thresholds: vec![0.0; n_classes],
            confident_joint: vec![vec![0; n_classes]; n_classes],
            q_hat: vec![vec![0.0; n_classes]; n_classes],
            flagged: Vec::new(),
            flagged_self_prob: Vec::new(),
            human_queue: Vec::new(),
        }
    }
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<(), VerifierError> {
    match labels.iter().find(|&&l| l >= n_classes) {
        Some(&label) => Err(VerifierError::BadLabel { label, n_classes }),
        None => Ok(()),
    }
}

/// Cross-validated probe probabilities: each sample is scored by the model
/// of the fold that excluded it. Folds come from a stable hash of the id.
pub fn probe_oos_probs(
    ids: &[&str],
    texts: &[&str],
    noisy_labels: &[usize],
    n_classes: usize,
    config: &ProbeConfig,
    seed: u64,
) -> Result<Vec<Vec<f64>>, VerifierError> {
    if ids.len() != texts.len() || ids.len() != noisy_labels.len() {
        return Err(VerifierError::LengthMismatch);
    }
    check_labels(noisy_labels, n_classes)?;
    for class in 0..n_classes {
        let count = noisy_labels.iter().filter(|&&l| l == class).count();
        if count < config.folds {
            return Err(VerifierError::ClassTooSmall {
                class,
                count,
                needed: config.folds,
            });
        }
    }
    let folds = config.folds.max(2);
    let assignment: Vec<usize> = ids.iter().map(|id| fold_of(id, folds, seed)).collect();
    let mut probs = vec![Vec::new(); ids.len()];
    for fold in 0..folds {
        let train: Vec<usize> = (0..ids.len()).filter(|&i| assignment[i] != fold).collect();
        let held: Vec<usize> = (0..ids.len()).filter(|&i| assignment[i] == fold).collect();
        if held.is_empty() {
            continue;
        }
        let model = ProbeModel::train(
            &train.iter().map(|&i| ids[i]).collect::<Vec<_>>(),
            &train.iter().map(|&i| texts[i]).collect::<Vec<_>>(),
            &train.iter().map(|&i| noisy_labels[i]).collect::<Vec<_>>(),
            n_classes,
            config,
            seed.wrapping_add(fold as u64),
        );
        for i in held {
            probs[i] = model.predict_proba(texts[i]);
        }
    }
    Ok(probs)
}

/// `t_j`: mean self-probability of class `j` over samples labelled `j`.
pub fn class_thresholds(
    probs: &[Vec<f64>],
    noisy_labels: &[usize],
    n_classes: usize,
) -> Result<Vec<f64>, VerifierError> {
    if probs.len() != noisy_labels.len() {
        return Err(VerifierError::LengthMismatch);
    }
    check_labels(noisy_labels, n_classes)?;
    let mut sums = vec![0.0; n_classes];
    let mut counts = vec![0usize; n_classes];
    for (p, &l) in probs.iter().zip(noisy_labels) {
        sums[l] += p[l];
        counts[l] += 1;
    }
    (0..n_classes)
        .map(|j| {
            if counts[j] == 0 {
                Err(VerifierError::EmptyClass(j))
            } else {
                Ok(sums[j] / counts[j] as f64)
            }
        })
        .collect()
}

/// `C[i][j]`: samples labelled `i` whose most probable above-threshold class
/// is `j`. Samples clearing no threshold are not counted; argmax ties go to
/// the lower class index.
pub fn confident_joint(probs: &[Vec<f64>], noisy_labels: &[usize], thresholds: &[f64]) -> Vec<Vec<u64>> {
    let k = thresholds.len();
    let mut c = vec![vec![0u64; k]; k];
    for (p, &i) in probs.iter().zip(noisy_labels) {
        let mut best: Option<usize> = None;
        for j in 0..k {
            if p[j] >= thresholds[j] && best.is_none_or(|b| p[j] > p[b]) {
                best = Some(j);
            }
        }
        if let Some(j) = best {
            c[i][j] += 1;
        }
    }
    c
}

/// Calibrated joint: each row of `C` rescaled to its class count, then the
/// whole matrix divided by its sum. A row with no confident counts but a
/// nonzero class count puts its full mass on the diagonal.
pub fn estimate_q(c: &[Vec<u64>], class_counts: &[usize]) -> Vec<Vec<f64>> {
    let k = c.len();
    let mut q = vec![vec![0.0; k]; k];
    for i in 0..k {
        let n_i = class_counts[i] as f64;
        let row_sum: u64 = c[i].iter().sum();
        if class_counts[i] == 0 {
            continue;
        }
        if row_sum == 0 {
            q[i][i] = n_i;
        } else {
            for j in 0..k {
                q[i][j] = c[i][j] as f64 / row_sum as f64 * n_i;
            }
        }
    }
    let total: f64 = q.iter().flatten().sum();
    if total > 0.0 {
        for v in q.iter_mut().flatten() {
            *v /= total;
        }
    }
    q
}

/// Flags `round(n * sum_{j != i} Q[i][j])` samples of each class `i` (half
/// up, capped at the class size) with the lowest self-probability, and
/// queues the least confident `ceil(rho * |flagged|)` of them for humans.
pub fn flag_noisy(
    q_hat: &[Vec<f64>],
    probs: &[Vec<f64>],
    noisy_labels: &[usize],
    ids: &[&str],
    rho: f64,
) -> Result<(Vec<String>, Vec<f64>, Vec<String>), VerifierError> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(VerifierError::BadRho(rho));
    }
    if probs.len() != noisy_labels.len() || ids.len() != probs.len() {
        return Err(VerifierError::LengthMismatch);
    }
    let n = probs.len() as f64;
    let k = q_hat.len();
    let mut chosen: Vec<(f64, &str)> = Vec::new();
    for i in 0..k {
        let off: f64 = (0..k).filter(|&j| j != i).map(|j| q_hat[i][j]).sum();
        let mut members: Vec<(f64, &str)> = noisy_labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == i)
            .map(|(s, _)| (probs[s][i], ids[s]))
            .collect();
        let count = round_half_up(n * off).min(members.len());
        members.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        chosen.extend(members.into_iter().take(count));
    }
    chosen.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
    let queue_len = ceil_tolerant(rho * chosen.len() as f64);
    let flagged: Vec<String> = chosen.iter().map(|(_, id)| id.to_string()).collect();
    let self_prob: Vec<f64> = chosen.iter().map(|(p, _)| *p).collect();
    let queue = flagged[..queue_len].to_vec();
    Ok((flagged, self_prob, queue))
}

/// Full confident-learning pass over given out-of-sample probabilities.
pub fn report_from_probs(
    probs: &[Vec<f64>],
    noisy_labels: &[usize],
    ids: &[&str],
    n_classes: usize,
    rho: f64,
) -> Result<NoiseReport, VerifierError> {
    let thresholds = class_thresholds(probs, noisy_labels, n_classes)?;
    let cj = confident_joint(probs, noisy_labels, &thresholds);
    let counts: Vec<usize> = (0..n_classes)
        .map(|c| noisy_labels.iter().filter(|&&l| l == c).count())
        .collect();
    let q_hat = estimate_q(&cj, &counts);
    let (flagged, flagged_self_prob, human_queue) = flag_noisy(&q_hat, probs, noisy_labels, ids, rho)?;
    Ok(NoiseReport {
        thresholds,
        confident_joint: cj,
        q_hat,
        flagged,
        flagged_self_prob,
        human_queue,
    })
}

/// Probe + confident learning. Returns the report and the probe probabilities.
pub fn verify(
    ids: &[&str],
    texts: &[&str],
    noisy_labels: &[usize],
    n_classes: usize,
    config: &ProbeConfig,
    rho: f64,
    seed: u64,
) -> Result<(NoiseReport, Vec<Vec<f64>>), VerifierError> {
    let probs = probe_oos_probs(ids, texts, noisy_labels, n_classes, config, seed)?;
    let report = report_from_probs(&probs, noisy_labels, ids, n_classes, rho)?;
    Ok((report, probs))
}
