//! Human-LLM co-annotation with domain-aware active learning for
//! cross-domain binary news-veracity classification.
//!
//! The crate is organized around the stages of one active-learning round:
//!
//! - [`corpus`]: JSONL ingestion, demo/pool/test splits, synthetic multi-domain corpora.
//! - [`encoder`]: sentence embeddings (mock or an external pretrained model).
//! - [`domainspace`]: k-means with silhouette model selection and soft domain memberships.
//! - [`sampler`]: domain-aware acquisition and the baseline strategies.
//! - [`annotator`]: k-NN few-shot prompting of a chat-completions LLM plus cost accounting.
//! - [`verifier`]: confident-learning label-error detection over a cross-validated n-gram probe.
//! - [`model`]: the dual-subspace cross-attention classifier and its two-step adversarial training.
//! - [`pipeline`]: the orchestrator, run state persistence, and the human-queue session.
//! - [`eval`]: per-source accuracy / precision / recall / F1.

pub mod annotator;
pub mod corpus;
pub mod domainspace;
pub mod encoder;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod sampler;
pub mod util;
pub mod verifier;

pub use corpus::{Label, NewsRecord};
