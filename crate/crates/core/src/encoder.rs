//! Sentence embeddings. All backends return unit-L2-norm vectors so cosine
//! similarity equals the dot product downstream.

use std::io::Write;
use std::process::{Command, Stdio};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{normalized, stable_hash};

/// A unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `values`; fails on zero or non-finite input.
    pub fn from_raw(values: Vec<f64>) -> Result<Self, EncoderError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EncoderError::NonFinite);
        }
        normalized(&values)
            .map(Embedding)
            .ok_or(EncoderError::ZeroVector)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding has zero norm")]
    ZeroVector,
    #[error("embedding has non-finite entries")]
    NonFinite,
    #[error("encoder backend unavailable: {0}")]
    Unavailable(String),
    #[error("encoder returned dimension {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("batch element {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<EncoderError>,
    },
}

pub trait Encoder: Send + Sync {
    fn dim(&self) -> usize;

    fn embed(&self, text: &str) -> Result<Embedding, EncoderError>;

    /// Elementwise [`Encoder::embed`]; the first failure is reported with its index.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EncoderError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                self.embed(t).map_err(|e| EncoderError::AtIndex {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

/// Offline deterministic encoder: the embedding is the normalized sum of one
/// seeded Gaussian vector per whitespace token.
#[derive(Debug, Clone)]
pub struct MockEncoder {
    dim: usize,
    seed: u64,
}

impl MockEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        MockEncoder { dim, seed }
    }

    fn token_vector(&self, token: &str, acc: &mut [f64]) {
        let mut rng =
            ChaCha8Rng::seed_from_u64(stable_hash(&[&self.seed.to_le_bytes(), token.as_bytes()]));
        for v in acc.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += z;
        }
    }
}

impl Encoder for MockEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EncoderError> {
        if text.trim().is_empty() {
            return Err(EncoderError::EmptyText);
        }
        let mut acc = vec![0.0; self.dim];
        for token in text.split_whitespace() {
            self.token_vector(&token.to_lowercase(), &mut acc);
        }
        Embedding::from_raw(acc)
    }
}

/// Runs a local embedding model as a subprocess. The command receives a JSON
/// array of strings on stdin and must print a JSON array of float arrays.
#[derive(Debug, Clone)]
pub struct CommandEncoder {
    program: String,
    args: Vec<String>,
    dim: usize,
}

impl CommandEncoder {
    pub fn new(command: &[String], dim: usize) -> Result<Self, EncoderError> {
        let (program, args) = command
            .split_first()
            .ok_or_else(|| EncoderError::Unavailable("empty encoder command".into()))?;
        Ok(CommandEncoder {
            program: program.clone(),
            args: args.to_vec(),
            dim,
        })
    }

    fn run(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EncoderError> {
        let unavailable = |e: String| EncoderError::Unavailable(format!("{}: {e}", self.program));
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| unavailable(e.to_string()))?;
        let payload = serde_json::to_vec(texts).expect("strings serialize");
        child
            .stdin
            .take()
            .expect("stdin is piped")
            .write_all(&payload)
            .map_err(|e| unavailable(e.to_string()))?;
        let output = child
            .wait_with_output()
            .map_err(|e| unavailable(e.to_string()))?;
        if !output.status.success() {
            return Err(unavailable(format!(
                "exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let vectors: Vec<Vec<f64>> = serde_json::from_slice(&output.stdout)
            .map_err(|e| unavailable(format!("bad output: {e}")))?;
        if vectors.len() != texts.len() {
            return Err(unavailable(format!(
                "returned {} vectors for {} texts",
                vectors.len(),
                texts.len()
            )));
        }
        Ok(vectors)
    }
}

impl Encoder for CommandEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Embedding, EncoderError> {
        self.embed_batch(&[text])
            .map(|mut v| v.remove(0))
            .map_err(|e| match e {
                EncoderError::AtIndex { source, .. } => *source,
                other => other,
            })
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EncoderError> {
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EncoderError::AtIndex {
                index,
                source: Box::new(EncoderError::EmptyText),
            });
        }
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        self.run(texts)?
            .into_iter()
            .enumerate()
            .map(|(index, v)| {
                let wrap = |e| EncoderError::AtIndex {
                    index,
                    source: Box::new(e),
                };
                if v.len() != self.dim {
                    return Err(wrap(EncoderError::DimensionMismatch {
                        expected: self.dim,
                        got: v.len(),
                    }));
                }
                Embedding::from_raw(v).map_err(wrap)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Pretrained,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub backend: Backend,
    pub dim: usize,
    pub seed: u64,
    /// Command line for the pretrained backend.
    pub command: Vec<String>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backend: Backend::Mock,
            dim: 16,
            seed: 0,
            command: Vec::new(),
        }
    }
}

pub fn build_encoder(config: &EncoderConfig) -> Result<Box<dyn Encoder>, EncoderError> {
    match config.backend {
        Backend::Mock => Ok(Box::new(MockEncoder::new(config.dim, config.seed))),
        Backend::Pretrained => Ok(Box::new(CommandEncoder::new(&config.command, config.dim)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::dot;

    #[test]
    fn mock_is_deterministic_and_unit_norm() {
        let enc = MockEncoder::new(16, 1);
        let a = enc.embed("breaking news about the senate").unwrap();
        let b = enc.embed("breaking news about the senate").unwrap();
        assert_eq!(a, b);
        assert!((dot(a.as_slice(), a.as_slice()).sqrt() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mock_seed_changes_vectors() {
        let a = MockEncoder::new(16, 1).embed("x y").unwrap();
        let b = MockEncoder::new(16, 2).embed("x y").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn empty_text_is_rejected() {
        let enc = MockEncoder::new(8, 0);
        assert!(matches!(enc.embed("   "), Err(EncoderError::EmptyText)));
        let err = enc.embed_batch(&["ok", ""]).unwrap_err();
        assert!(matches!(err, EncoderError::AtIndex { index: 1, .. }));
    }

    #[test]
    fn batch_matches_loop() {
        let enc = MockEncoder::new(16, 4);
        assert!(enc.embed_batch(&[]).unwrap().is_empty());
        let texts: Vec<String> = (0..128).map(|i| format!("token{} common w{}", i, i % 7)).collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let batch = enc.embed_batch(&refs).unwrap();
        for (t, b) in refs.iter().zip(&batch) {
            let single = enc.embed(t).unwrap();
            for (x, y) in single.as_slice().iter().zip(b.as_slice()) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn missing_command_is_unavailable() {
        let enc = CommandEncoder::new(&["/definitely/not/a/binary".to_string()], 4).unwrap();
        assert!(matches!(enc.embed("hello"), Err(EncoderError::Unavailable(_))));
    }

    #[test]
    fn command_backend_normalizes_output() {
        let script = "import json,sys; t=json.load(sys.stdin); print(json.dumps([[3.0,4.0] for _ in t]))";
        let enc = CommandEncoder::new(
            &["python3".to_string(), "-c".to_string(), script.to_string()],
            2,
        )
        .unwrap();
        match enc.embed_batch(&["a", "b"]) {
            Ok(v) => {
                assert_eq!(v.len(), 2);
                assert!((v[0].as_slice()[0] - 0.6).abs() < 1e-12);
            }
            // python3 missing from the environment
            Err(EncoderError::Unavailable(_)) => {}
            Err(e) => panic!("unexpected error {e}"),
        }
    }
}
