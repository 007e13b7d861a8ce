//! Acquisition strategies: domain-aware cold start and per-cluster entropy
//! selection, plus the random / max-entropy / least-confidence / k-means
//! diversity baselines.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domainspace::{kmeans, DomainSpace};
use crate::util::{binary_entropy, ceil_tolerant, cosine, derive_rng};

/// Smoothing constant in the inverse-size cluster weights.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    DomainAware,
    Random,
    MaxEntropy,
    LeastConfidence,
    KmeansDiversity,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::DomainAware,
        Strategy::Random,
        Strategy::MaxEntropy,
        Strategy::LeastConfidence,
        Strategy::KmeansDiversity,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::DomainAware => "domain_aware",
            Strategy::Random => "random",
            Strategy::MaxEntropy => "max_entropy",
            Strategy::LeastConfidence => "least_confidence",
            Strategy::KmeansDiversity => "kmeans_diversity",
        }
    }
}

/// What actually produced a selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionKind {
    DomainAwareCold,
    DomainAwareEntropy,
    Random,
    MaxEntropy,
    LeastConfidence,
    KmeansDiversity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub per_cluster: Vec<usize>,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionResult {
    pub selected_ids: Vec<String>,
    pub strategy: AcquisitionKind,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("pool is empty")]
    EmptyPool,
    #[error("epsilon must be positive")]
    BadEpsilon,
    #[error("budget {budget} exceeds total capacity {capacity}")]
    OverBudget { budget: usize, capacity: usize },
    #[error("missing classifier probability for {0:?}")]
    MissingProbability(String),
    #[error("probability {p} for {id:?} lies outside [0, 1]")]
    BadProbability { id: String, p: f64 },
    #[error("strategy {0:?} needs classifier probabilities")]
    ProbabilitiesRequired(Strategy),
    #[error("weights and capacities differ in length")]
    LengthMismatch,
}

/// One unlabelled candidate.
#[derive(Debug, Clone, Copy)]
pub struct PoolItem<'a> {
    pub id: &'a str,
    pub embedding: &'a [f64],
}

/// Pool items grouped by cluster, ids ascending within each group.
fn group_by_cluster<'a>(space: &DomainSpace, pool: &[PoolItem<'a>]) -> Vec<Vec<PoolItem<'a>>> {
    let mut groups = vec![Vec::new(); space.k];
    for item in pool {
        groups[space.cluster_of(item.id, item.embedding)].push(*item);
    }
    for g in &mut groups {
        g.sort_by(|a, b| a.id.cmp(b.id));
    }
    groups
}

/// Number of pool records in each cluster.
pub fn capacities(space: &DomainSpace, pool: &[PoolItem<'_>]) -> Vec<usize> {
    group_by_cluster(space, pool).iter().map(Vec::len).collect()
}

/// `w_j = 1 / (|C_j ∩ pool| + epsilon)`, normalized to sum to one.
pub fn cluster_weights(
    space: &DomainSpace,
    pool: &[PoolItem<'_>],
    epsilon: f64,
) -> Result<Vec<f64>, SamplerError> {
    if pool.is_empty() {
        return Err(SamplerError::EmptyPool);
    }
    weights_from_sizes(&capacities(space, pool), epsilon)
}

pub fn weights_from_sizes(sizes: &[usize], epsilon: f64) -> Result<Vec<f64>, SamplerError> {
    if epsilon <= 0.0 || !epsilon.is_finite() {
        return Err(SamplerError::BadEpsilon);
    }
    if sizes.iter().all(|&s| s == 0) {
        return Err(SamplerError::EmptyPool);
    }
    let raw: Vec<f64> = sizes.iter().map(|&s| 1.0 / (s as f64 + epsilon)).collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

/// Ceiling allocation `m_j = ceil(M * w_j)` clamped to capacity, then repaired
/// to sum exactly to `M`: overshoot is removed one unit at a time from the
/// cluster with the largest `m_j` (ties: larger capacity, then lower index);
/// shortfall is added to the cluster with the most remaining capacity
/// (ties: lower index).
pub fn allocate(
    budget: usize,
    weights: &[f64],
    capacities: &[usize],
) -> Result<Allocation, SamplerError> {
    if weights.len() != capacities.len() {
        return Err(SamplerError::LengthMismatch);
    }
    let capacity: usize = capacities.iter().sum();
    if budget > capacity {
        return Err(SamplerError::OverBudget { budget, capacity });
    }
    let mut m: Vec<usize> = weights
        .iter()
        .zip(capacities)
        .map(|(&w, &cap)| ceil_tolerant(budget as f64 * w).min(cap))
        .collect();
    while m.iter().sum::<usize>() > budget {
        let j = (0..m.len())
            .filter(|&j| m[j] > 0)
            .max_by(|&a, &b| {
                m[a].cmp(&m[b])
                    .then(capacities[a].cmp(&capacities[b]))
                    .then(b.cmp(&a))
            })
            .expect("positive total has a positive entry");
        m[j] -= 1;
    }
    while m.iter().sum::<usize>() < budget {
        let j = (0..m.len())
            .filter(|&j| m[j] < capacities[j])
            .max_by(|&a, &b| (capacities[a] - m[a]).cmp(&(capacities[b] - m[b])).then(b.cmp(&a)))
            .expect("budget within capacity");
        m[j] += 1;
    }
    Ok(Allocation {
        per_cluster: m,
        total: budget,
    })
}

/// Round-one selection: per cluster, the `m_j` pool points closest (cosine)
/// to the centroid. Ties are broken by record id.
pub fn cold_start_select(
    space: &DomainSpace,
    pool: &[PoolItem<'_>],
    allocation: &Allocation,
) -> Result<AcquisitionResult, SamplerError> {
    if pool.is_empty() {
        return Err(SamplerError::EmptyPool);
    }
    let groups = group_by_cluster(space, pool);
    let mut result = AcquisitionResult {
        selected_ids: Vec::new(),
        strategy: AcquisitionKind::DomainAwareCold,
        scores: BTreeMap::new(),
    };
    for (j, group) in groups.iter().enumerate() {
        let mut scored: Vec<(f64, &str)> = group
            .iter()
            .map(|it| {
                let sim = cosine(it.embedding, &space.centroids[j]).unwrap_or(-1.0);
                (1.0 - sim, it.id)
            })
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        take_into(&mut result, scored, allocation.per_cluster[j]);
    }
    Ok(result)
}

fn take_into(result: &mut AcquisitionResult, ranked: Vec<(f64, &str)>, m: usize) {
    for (score, id) in ranked.into_iter().take(m) {
        result.selected_ids.push(id.to_string());
        result.scores.insert(id.to_string(), score);
    }
}

fn checked_prob(probs: &BTreeMap<String, f64>, id: &str) -> Result<f64, SamplerError> {
    let p = *probs
        .get(id)
        .ok_or_else(|| SamplerError::MissingProbability(id.to_string()))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(SamplerError::BadProbability {
            id: id.to_string(),
            p,
        });
    }
    Ok(p)
}

/// Later rounds: per cluster, the `m_j` pool points with the highest binary
/// entropy of the classifier's p(fake). Ties are broken by record id.
pub fn entropy_select(
    space: &DomainSpace,
    pool: &[PoolItem<'_>],
    allocation: &Allocation,
    probs: &BTreeMap<String, f64>,
) -> Result<AcquisitionResult, SamplerError> {
    if pool.is_empty() {
        return Err(SamplerError::EmptyPool);
    }
    let groups = group_by_cluster(space, pool);
    let mut result = AcquisitionResult {
        selected_ids: Vec::new(),
        strategy: AcquisitionKind::DomainAwareEntropy,
        scores: BTreeMap::new(),
    };
    for (j, group) in groups.iter().enumerate() {
        let mut scored = Vec::with_capacity(group.len());
        for it in group {
            scored.push((binary_entropy(checked_prob(probs, it.id)?), it.id));
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        take_into(&mut result, scored, allocation.per_cluster[j]);
    }
    Ok(result)
}

/// Global (quota-free) baseline strategies over the whole pool.
pub fn baseline_select(
    strategy: Strategy,
    pool: &[PoolItem<'_>],
    budget: usize,
    probs: Option<&BTreeMap<String, f64>>,
    seed: u64,
) -> Result<AcquisitionResult, SamplerError> {
    if pool.is_empty() {
        return Err(SamplerError::EmptyPool);
    }
    let budget = budget.min(pool.len());
    let mut sorted: Vec<PoolItem<'_>> = pool.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(b.id));
    let mut result = AcquisitionResult {
        selected_ids: Vec::new(),
        strategy: AcquisitionKind::Random,
        scores: BTreeMap::new(),
    };
    match strategy {
        Strategy::Random => {
            let mut rng = derive_rng(seed, "sampler/random", 0);
            let mut order: Vec<&str> = sorted.iter().map(|it| it.id).collect();
            order.shuffle(&mut rng);
            let ranked = order.into_iter().map(|id| (0.0, id)).collect();
            take_into(&mut result, ranked, budget);
        }
        Strategy::MaxEntropy | Strategy::LeastConfidence | Strategy::DomainAware => {
            let probs = probs.ok_or(SamplerError::ProbabilitiesRequired(strategy))?;
            let mut scored = Vec::with_capacity(sorted.len());
            for it in &sorted {
                let p = checked_prob(probs, it.id)?;
                let score = if strategy == Strategy::LeastConfidence {
                    1.0 - p.max(1.0 - p)
                } else {
                    binary_entropy(p)
                };
                scored.push((score, it.id));
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
            result.strategy = if strategy == Strategy::LeastConfidence {
                AcquisitionKind::LeastConfidence
            } else {
                AcquisitionKind::MaxEntropy
            };
            take_into(&mut result, scored, budget);
        }
        Strategy::KmeansDiversity => {
            result.strategy = AcquisitionKind::KmeansDiversity;
            let points: Vec<Vec<f64>> = sorted
                .iter()
                .map(|it| crate::util::normalized(it.embedding).unwrap_or_else(|| it.embedding.to_vec()))
                .collect();
            let k = budget;
            let centers = kmeans(&points, k, 1, 100, seed)
                .map(|f| f.centroids)
                .unwrap_or_else(|| points.iter().take(k).cloned().collect());
            let mut taken: HashSet<usize> = HashSet::new();
            for c in &centers {
                let mut best: Option<(f64, usize)> = None;
                for (i, p) in points.iter().enumerate() {
                    if taken.contains(&i) {
                        continue;
                    }
                    let d: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, i));
                    }
                }
                if let Some((d, i)) = best {
                    taken.insert(i);
                    result.selected_ids.push(sorted[i].id.to_string());
                    result.scores.insert(sorted[i].id.to_string(), d.sqrt());
                }
            }
        }
    }
    Ok(result)
}
