//! Small shared helpers: stable hashing, seeded RNG derivation, vector math.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Hash that is stable across platforms, processes, and toolchain versions.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 digest has 32 bytes"))
}

/// Uniform value in [0, 1) derived from a stable hash.
pub fn hash_unit(parts: &[&[u8]]) -> f64 {
    (stable_hash(parts) >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic RNG for a named stage of a seeded computation.
pub fn derive_rng(seed: u64, stage: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(&[
        &seed.to_le_bytes(),
        stage.as_bytes(),
        &index.to_le_bytes(),
    ]))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let denom = norm(a) * norm(b);
    if denom == 0.0 || !denom.is_finite() {
        return None;
    }
    Some(dot(a, b) / denom)
}

/// Rescales to unit L2 norm; returns `None` for the zero vector.
pub fn normalized(a: &[f64]) -> Option<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(a.iter().map(|x| x / n).collect())
}

/// Binary entropy in nats with `0 * ln 0 := 0`.
pub fn binary_entropy(p: f64) -> f64 {
    let term = |q: f64| if q <= 0.0 { 0.0 } else { q * q.ln() };
    -(term(p) + term(1.0 - p))
}

/// Round half up to the nearest integer (for nonnegative inputs).
pub fn round_half_up(x: f64) -> usize {
    if x <= 0.0 {
        0
    } else {
        (x + 0.5 + 1e-9).floor() as usize
    }
}

/// Ceiling that ignores floating-point dust just above an integer.
pub fn ceil_tolerant(x: f64) -> usize {
    if x <= 0.0 {
        0
    } else {
        (x - 1e-9).ceil() as usize
    }
}
