//! Bag-of-n-grams linear probe: averaged n-gram embeddings feeding a softmax
//! head, trained with plain SGD and a linearly decaying learning rate.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::util::{derive_rng, stable_hash};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_ngram")]
    pub ngram: usize,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
}

fn default_lr() -> f64 {
    0.1
}
fn default_dim() -> usize {
    100
}
fn default_ngram() -> usize {
    3
}
fn default_folds() -> usize {
    5
}
fn default_epochs() -> usize {
    25
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            lr: default_lr(),
            dim: default_dim(),
            ngram: default_ngram(),
            folds: default_folds(),
            epochs: default_epochs(),
        }
    }
}

/// Word n-grams of orders 1..=`ngram` over lowercased whitespace tokens.
pub fn features(text: &str, ngram: usize) -> Vec<String> {
    let tokens: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    let mut out = Vec::new();
    for n in 1..=ngram.max(1) {
        for window in tokens.windows(n) {
            out.push(window.join(" "));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct ProbeModel {
    vocabulary: HashMap<String, usize>,
    embeddings: Vec<f64>,
    head: Vec<f64>,
    dim: usize,
    n_classes: usize,
    ngram: usize,
}

impl ProbeModel {
    /// Trains on `(id, text, label)` samples. The result does not depend on
    /// the order of the input: samples are canonicalized by a hash of the id.
    pub fn train(
        ids: &[&str],
        texts: &[&str],
        labels: &[usize],
        n_classes: usize,
        config: &ProbeConfig,
        seed: u64,
    ) -> ProbeModel {
        let dim = config.dim.max(1);
        let feats: Vec<Vec<String>> = texts.iter().map(|t| features(t, config.ngram)).collect();
        let vocab_sorted: BTreeSet<&str> = feats.iter().flatten().map(String::as_str).collect();
        let vocabulary: HashMap<String, usize> = vocab_sorted
            .iter()
            .enumerate()
            .map(|(i, f)| (f.to_string(), i))
            .collect();

        let mut rng = derive_rng(seed, "probe/init", 0);
        let bound = 1.0 / dim as f64;
        let embeddings: Vec<f64> = (0..vocabulary.len() * dim)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let mut model = ProbeModel {
            vocabulary,
            embeddings,
            head: vec![0.0; n_classes * dim],
            dim,
            n_classes,
            ngram: config.ngram,
        };

        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by_key(|&i| (stable_hash(&[ids[i].as_bytes()]), ids[i]));
        let indexed: Vec<Vec<usize>> = feats
            .iter()
            .map(|f| f.iter().map(|x| model.vocabulary[x]).collect())
            .collect();

        let total = (config.epochs * order.len()).max(1) as f64;
        let mut step = 0usize;
        let mut hidden = vec![0.0; dim];
        let mut grad_hidden = vec![0.0; dim];
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let lr = config.lr * (1.0 - step as f64 / total);
                step += 1;
                let rows = &indexed[i];
                if rows.is_empty() {
                    continue;
                }
                model.average(rows, &mut hidden);
                let probs = model.softmax(&hidden);
                grad_hidden.iter_mut().for_each(|g| *g = 0.0);
                for (k, &p) in probs.iter().enumerate() {
                    let g = p - if k == labels[i] { 1.0 } else { 0.0 };
                    let w = &mut model.head[k * dim..(k + 1) * dim];
                    for d in 0..dim {
                        grad_hidden[d] += g * w[d];
                        w[d] -= lr * g * hidden[d];
                    }
                }
                let scale = lr / rows.len() as f64;
                for &r in rows {
                    let e = &mut model.embeddings[r * dim..(r + 1) * dim];
                    for d in 0..dim {
                        e[d] -= scale * grad_hidden[d];
                    }
                }
            }
        }
        model
    }

    fn average(&self, rows: &[usize], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &r in rows {
            for (o, e) in out.iter_mut().zip(&self.embeddings[r * self.dim..(r + 1) * self.dim]) {
                *o += e;
            }
        }
        let n = rows.len().max(1) as f64;
        out.iter_mut().for_each(|v| *v /= n);
    }

    fn softmax(&self, hidden: &[f64]) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.n_classes)
            .map(|k| {
                self.head[k * self.dim..(k + 1) * self.dim]
                    .iter()
                    .zip(hidden)
                    .map(|(w, h)| w * h)
                    .sum()
            })
            .collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    /// Class probabilities; texts with no known n-gram get the uniform distribution.
    pub fn predict_proba(&self, text: &str) -> Vec<f64> {
        let rows: Vec<usize> = features(text, self.ngram)
            .iter()
            .filter_map(|f| self.vocabulary.get(f).copied())
            .collect();
        if rows.is_empty() {
            return vec![1.0 / self.n_classes as f64; self.n_classes];
        }
        let mut hidden = vec![0.0; self.dim];
        self.average(&rows, &mut hidden);
        self.softmax(&hidden)
    }

    pub fn vocabulary_size(&self) -> usize {
        self.vocabulary.len()
    }
}

/// Fold of a record, from a stable hash of its id.
pub fn fold_of(id: &str, folds: usize, seed: u64) -> usize {
    (stable_hash(&[&seed.to_le_bytes(), b"fold", id.as_bytes()]) % folds.max(1) as u64) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ngram_features() {
        let f = features("A b c", 3);
        assert_eq!(f, vec!["a", "b", "c", "a b", "b c", "a b c"]);
        assert_eq!(features("one", 3), vec!["one"]);
    }

    #[test]
    fn learns_disjoint_vocabularies() {
        let ids: Vec<String> = (0..40).map(|i| format!("s{i}")).collect();
        let texts: Vec<String> = (0..40)
            .map(|i| if i % 2 == 0 { format!("apple banana cherry v{i}") } else { format!("xray yankee zulu v{i}") })
            .collect();
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let id_refs: Vec<&str> = ids.iter().map(String::as_str).collect();
        let text_refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let m = ProbeModel::train(&id_refs, &text_refs, &labels, 2, &ProbeConfig::default(), 0);
        let p = m.predict_proba("banana apple");
        assert!(p[0] > 0.5);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(m.predict_proba("unknown words"), vec![0.5, 0.5]);
    }
}
