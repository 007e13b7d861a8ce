//! Persistent run state and its checksummed file format.
//!
//! A state file is a one-line JSON header followed by the JSON payload:
//!
//! ```text
//! {"format":"coalfake-state","version":1,"sha256":"<hex of payload bytes>"}
//! {...payload...}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::annotator::{Annotation, Cost, CostLedger, Provenance};
use crate::corpus::Label;
use crate::domainspace::DomainSpace;
use crate::eval::Metrics;
use crate::model::LossBreakdown;
use crate::sampler::AcquisitionKind;
use crate::util::sha256_hex;
use crate::verifier::NoiseReport;

pub const STATE_FORMAT: &str = "coalfake-state";
pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Sampling,
    Annotating,
    AwaitingHuman,
    Training,
    Done,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Sampling => "sampling",
            Status::Annotating => "annotating",
            Status::AwaitingHuman => "awaiting_human",
            Status::Training => "training",
            Status::Done => "done",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxRounds,
    PoolExhausted,
    Plateau,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxRounds => "max_rounds",
            StopReason::PoolExhausted => "pool_exhausted",
            StopReason::Plateau => "plateau",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub label: Label,
    pub provenance: Provenance,
    /// What the LLM said, when it was asked.
    pub llm_label: Option<Label>,
    /// Probe probability of the assigned label at verification time.
    pub probe_self_prob: Option<f64>,
    /// Round (1-based) in which the record was acquired.
    pub round: usize,
    pub annotator: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanLabel {
    pub label: Label,
    pub annotator: String,
}

/// The acquisition, annotation and review data of the round in progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PendingRound {
    pub selected: Vec<String>,
    pub strategy: Option<AcquisitionKind>,
    pub annotations: Vec<Annotation>,
    pub noise: Option<NoiseReport>,
    /// Probe p(fake) for every record that went through verification.
    pub probe_p_fake: BTreeMap<String, f64>,
    /// Review queue, least confident first; abstentions come last.
    pub human_queue: Vec<String>,
    /// Labels already submitted for this round's queue.
    pub human_done: BTreeMap<String, HumanLabel>,
    pub flagged: usize,
    pub human_shortfall: usize,
}

/// The per-round metrics record written to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub per_source: BTreeMap<String, Metrics>,
    pub macro_f1: f64,
    pub cost: Cost,
    pub flagged: usize,
    pub human_labeled: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub metrics: RoundMetrics,
    pub strategy: AcquisitionKind,
    pub selected: usize,
    pub labelled_total: usize,
    pub val_macro_f1: f64,
    pub loss: LossBreakdown,
    pub best_epoch: usize,
    pub noise: Option<NoiseReport>,
    pub k: usize,
    pub silhouette: f64,
    pub demo_size: usize,
    pub human_shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub run_id: String,
    /// Completed rounds.
    pub round: usize,
    pub status: Status,
    pub stop_reason: Option<StopReason>,
    pub labelled: BTreeMap<String, LabeledExample>,
    pub pool_remaining: BTreeSet<String>,
    /// Demonstration ids and the labels shown for them.
    pub demo: BTreeMap<String, Label>,
    pub initial_demo_size: usize,
    pub rounds: Vec<RoundRecord>,
    pub pending: Option<PendingRound>,
    pub ledger: CostLedger,
    pub domain_space: Option<DomainSpace>,
    /// Latest classifier p(fake) over the remaining pool.
    pub pool_probs: BTreeMap<String, f64>,
    /// File name of the latest classifier checkpoint, next to the state file.
    pub checkpoint: Option<String>,
}

impl RunState {
    pub fn metrics(&self) -> Vec<&RoundMetrics> {
        self.rounds.iter().map(|r| &r.metrics).collect()
    }

    /// Per-round metrics as pretty JSON. Maps are ordered, so the output is
    /// byte-stable for a given state.
    pub fn metrics_json(&self) -> String {
        serde_json::to_string_pretty(&self.metrics()).expect("metrics serialize")
    }

    /// Queued ids still waiting for a human label, in queue order.
    pub fn open_queue(&self) -> Vec<&str> {
        match &self.pending {
            Some(p) if self.status == Status::AwaitingHuman => p
                .human_queue
                .iter()
                .filter(|id| !p.human_done.contains_key(*id))
                .map(String::as_str)
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn to_file_bytes(&self) -> Vec<u8> {
        let payload = serde_json::to_vec(self).expect("state serializes");
        let header = serde_json::json!({
            "format": STATE_FORMAT,
            "version": STATE_VERSION,
            "sha256": sha256_hex(&payload),
        });
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self, PipelineError> {
        let corrupt = |m: &str| PipelineError::CorruptState(m.to_string());
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("missing header line"))?;
        let (header, payload) = (&bytes[..nl], &bytes[nl + 1..]);
        let header: serde_json::Value = serde_json::from_slice(header).map_err(|_| corrupt("header is not JSON"))?;
        if header.get("format").and_then(|v| v.as_str()) != Some(STATE_FORMAT) {
            return Err(corrupt("not a state file"));
        }
        let version = header.get("version").and_then(|v| v.as_u64());
        if version != Some(STATE_VERSION as u64) {
            return Err(PipelineError::StateVersion(version.unwrap_or(0)));
        }
        if header.get("sha256").and_then(|v| v.as_str()) != Some(sha256_hex(payload).as_str()) {
            return Err(corrupt("checksum mismatch"));
        }
        let state: RunState = serde_json::from_slice(payload).map_err(|e| corrupt(&e.to_string()))?;
        state.check_invariants().map_err(|e| corrupt(&e))?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_file_bytes()).map_err(|e| PipelineError::Io { path: path.to_path_buf(), message: e.to_string() })?;
        std::fs::rename(&tmp, path).map_err(|e| PipelineError::Io { path: path.to_path_buf(), message: e.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path).map_err(|_| PipelineError::MissingFile(path.to_path_buf()))?;
        Self::from_file_bytes(&bytes)
    }

    /// Structural invariants that must hold between any two stage transitions.
    pub fn check_invariants(&self) -> Result<(), String> {
        if let Some(id) = self.labelled.keys().find(|id| self.pool_remaining.contains(*id)) {
            return Err(format!("{id} is both labelled and in the pool"));
        }
        if self.rounds.len() != self.round {
            return Err(format!("{} metrics records for {} rounds", self.rounds.len(), self.round));
        }
        Ok(())
    }
}
