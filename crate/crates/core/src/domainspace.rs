//! Unsupervised domain discovery: k-means over sentence embeddings with the
//! cluster count chosen by cosine silhouette, and soft domain memberships
//! (softmax over cosine similarity to each centroid).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{cosine, derive_rng, dot, normalized};

#[derive(Debug, Error, PartialEq)]
pub enum DomainError {
    #[error("need more than k_max = {k_max} points to cluster, got {n}")]
    TooFewPoints { n: usize, k_max: usize },
    #[error("invalid cluster range [{k_min}, {k_max}]; need 2 <= k_min <= k_max")]
    InvalidRange { k_min: usize, k_max: usize },
    #[error("degenerate geometry: points are identical, silhouette undefined")]
    DegenerateGeometry,
    #[error("input vector has zero norm")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("ids and embeddings differ in length")]
    LengthMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterOptions {
    #[serde(default = "default_k_min")]
    pub k_min: usize,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Silhouette change below which the previous round's k is kept.
    #[serde(default = "default_stability")]
    pub stability: f64,
}

fn default_k_min() -> usize {
    2
}
fn default_k_max() -> usize {
    10
}
fn default_restarts() -> usize {
    5
}
fn default_max_iter() -> usize {
    300
}
fn default_stability() -> f64 {
    0.01
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            k_min: default_k_min(),
            k_max: default_k_max(),
            restarts: default_restarts(),
            max_iter: default_max_iter(),
            stability: default_stability(),
        }
    }
}

/// A fitted cluster model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpace {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: BTreeMap<String, usize>,
    pub silhouette: f64,
}

/// Soft membership of one record over the `k` clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainEmbedding {
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn means(points: &[Vec<f64>], labels: &[usize], k: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            for v in s.iter_mut() {
                *v /= c as f64;
            }
        }
    }
    (sums, counts)
}

fn kmeans_plus_plus(points: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Option<Vec<Vec<f64>>> {
    let n = points.len();
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut target = rng.random::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        if d2[pick] <= 0.0 {
            pick = d2
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)?;
        }
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().expect("just pushed")));
        }
    }
    Some(centers)
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> Option<KMeansFit> {
    let k = centroids.len();
    let mut labels: Vec<usize> = Vec::new();
    for _ in 0..max_iter.max(1) {
        let new_labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if new_labels == labels {
            break;
        }
        labels = new_labels;
        let (mut c, mut counts) = means(points, &labels, k);
        // Re-seed empty clusters with the point farthest from its centroid.
        while let Some(empty) = counts.iter().position(|&n| n == 0) {
            let (far, dist) = points
                .iter()
                .enumerate()
                .filter(|(i, _)| counts[labels[*i]] > 1)
                .map(|(i, p)| (i, sq_dist(p, &c[labels[i]])))
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))?;
            if dist <= 0.0 {
                return None;
            }
            labels[far] = empty;
            let recomputed = means(points, &labels, k);
            c = recomputed.0;
            counts = recomputed.1;
        }
        centroids = c;
    }
    let inertia = points
        .iter()
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l]))
        .sum();
    Some(KMeansFit {
        centroids,
        labels,
        inertia,
    })
}

/// k-means++ seeding with Lloyd iterations; best inertia over `restarts`.
/// Returns `None` when `k` distinct clusters cannot be formed.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    restarts: usize,
    max_iter: usize,
    seed: u64,
) -> Option<KMeansFit> {
    if k == 0 || points.len() < k {
        return None;
    }
    let mut best: Option<KMeansFit> = None;
    for restart in 0..restarts.max(1) {
        let mut rng = derive_rng(seed, &format!("kmeans/k{k}"), restart as u64);
        let Some(init) = kmeans_plus_plus(points, k, &mut rng) else {
            continue;
        };
        let Some(fit) = lloyd(points, init, max_iter) else {
            continue;
        };
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    best
}

/// Mean silhouette under cosine distance `1 - cos(x, y)`.
///
/// For unit vectors the mean cosine distance from `x` to a cluster is
/// `1 - x . (sum of members) / size`, which gives an exact O(n k D) evaluation.
/// Singleton clusters score 0. Returns `None` with fewer than two nonempty clusters.
pub fn silhouette_cosine(points: &[Vec<f64>], labels: &[usize], k: usize) -> Option<f64> {
    let unit: Vec<Vec<f64>> = points
        .iter()
        .map(|p| normalized(p).unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();
    let dim = unit.first()?.len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in unit.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return None;
    }
    let mut total = 0.0;
    for (p, &own) in unit.iter().zip(labels) {
        if counts[own] == 1 {
            continue;
        }
        let self_sim = dot(p, p);
        let a = ((counts[own] - 1) as f64 - (dot(p, &sums[own]) - self_sim)) / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| 1.0 - dot(p, &sums[c]) / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Some(total / points.len() as f64)
}

fn check_inputs(
    ids: &[String],
    embeddings: &[Vec<f64>],
    k_min: usize,
    k_max: usize,
) -> Result<(), DomainError> {
    if ids.len() != embeddings.len() {
        return Err(DomainError::LengthMismatch);
    }
    if k_min < 2 || k_max < k_min {
        return Err(DomainError::InvalidRange { k_min, k_max });
    }
    if embeddings.len() <= k_max {
        return Err(DomainError::TooFewPoints {
            n: embeddings.len(),
            k_max,
        });
    }
    let first = &embeddings[0];
    if let Some(bad) = embeddings.iter().find(|e| e.len() != first.len()) {
        return Err(DomainError::DimensionMismatch {
            expected: first.len(),
            got: bad.len(),
        });
    }
    if embeddings.iter().all(|e| sq_dist(e, first) <= 1e-24) {
        return Err(DomainError::DegenerateGeometry);
    }
    Ok(())
}

fn fit_k(
    ids: &[String],
    embeddings: &[Vec<f64>],
    k: usize,
    opts: &ClusterOptions,
    seed: u64,
) -> Option<DomainSpace> {
    let fit = kmeans(embeddings, k, opts.restarts, opts.max_iter, seed)?;
    let silhouette = silhouette_cosine(embeddings, &fit.labels, k)?;
    Some(DomainSpace {
        k,
        centroids: fit.centroids,
        assignments: ids.iter().cloned().zip(fit.labels).collect(),
        silhouette,
    })
}

/// Fits k-means for every k in `[k_min, k_max]` and keeps the model with the
/// highest silhouette (ties go to the smaller k).
pub fn fit(
    ids: &[String],
    embeddings: &[Vec<f64>],
    opts: &ClusterOptions,
    seed: u64,
) -> Result<DomainSpace, DomainError> {
    check_inputs(ids, embeddings, opts.k_min, opts.k_max)?;
    let mut best: Option<DomainSpace> = None;
    for k in opts.k_min..=opts.k_max {
        if let Some(space) = fit_k(ids, embeddings, k, opts, seed) {
            if best.as_ref().is_none_or(|b| space.silhouette > b.silhouette) {
                best = Some(space);
            }
        }
    }
    best.ok_or(DomainError::DegenerateGeometry)
}

/// Per-round refit. When a previous space exists, its k is tried first and
/// kept if the silhouette moved by less than `opts.stability`; otherwise the
/// full range is scanned again.
pub fn refit(
    previous: Option<&DomainSpace>,
    ids: &[String],
    embeddings: &[Vec<f64>],
    opts: &ClusterOptions,
    seed: u64,
) -> Result<DomainSpace, DomainError> {
    if let Some(prev) = previous {
        check_inputs(ids, embeddings, opts.k_min, opts.k_max)?;
        if let Some(space) = fit_k(ids, embeddings, prev.k, opts, seed) {
            if (space.silhouette - prev.silhouette).abs() < opts.stability {
                return Ok(space);
            }
        }
    }
    fit(ids, embeddings, opts, seed)
}

impl DomainSpace {
    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Cluster of a fitted id, or the nearest-centroid cluster otherwise.
    pub fn cluster_of(&self, id: &str, embedding: &[f64]) -> usize {
        self.assignments
            .get(id)
            .copied()
            .unwrap_or_else(|| nearest(embedding, &self.centroids).0)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("domain space serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// `probs[j] = exp(s_j) / sum_c exp(s_c)` with `s_j` the cosine similarity to centroid j.
pub fn membership(x: &[f64], space: &DomainSpace) -> Result<DomainEmbedding, DomainError> {
    if x.len() != space.dim() {
        return Err(DomainError::DimensionMismatch {
            expected: space.dim(),
            got: x.len(),
        });
    }
    if x.iter().all(|v| *v == 0.0) {
        return Err(DomainError::ZeroNorm);
    }
    let sims: Vec<f64> = space
        .centroids
        .iter()
        .map(|c| cosine(x, c).unwrap_or(0.0))
        .collect();
    let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(DomainEmbedding {
        probs: exps.into_iter().map(|e| e / z).collect(),
    })
}

/// Domain embedding of a record: membership of its text embedding.
pub fn domain_embedding(
    record: &crate::corpus::NewsRecord,
    encoder: &dyn crate::encoder::Encoder,
    space: &DomainSpace,
) -> Result<DomainEmbedding, DomainEmbeddingError> {
    let z = encoder.embed(&record.text)?;
    Ok(membership(z.as_slice(), space)?)
}

#[derive(Debug, Error)]
pub enum DomainEmbeddingError {
    #[error(transparent)]
    Encoder(#[from] crate::encoder::EncoderError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}
