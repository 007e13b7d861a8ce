//! The active-learning loop as an explicit stage machine over [`RunState`].
//!
//! One round is `sampling -> annotating -> [awaiting_human] -> training`.
//! Each call to [`Pipeline::advance`] performs exactly one stage, so a run
//! can be saved and resumed between any two stages. Every random choice is
//! derived from the run seed, the stage name and the round number, which is
//! what makes a resumed run reach the same metrics as an uninterrupted one.

pub mod config;
pub mod session;
mod state;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    CorpusConfig, CorpusFile, DemoGrowthConfig, HumanConfig, HumanMode, LlmBackend, LlmConfig, RunConfig,
    SamplingConfig, ServiceConfig, StopConfig,
};
pub use state::{
    HumanLabel, LabeledExample, PendingRound, RoundMetrics, RoundRecord, RunState, Status, StopReason,
    STATE_FORMAT, STATE_VERSION,
};

use crate::annotator::{
    estimate_tokens, retrieve_demos, Annotator, AnnotatorError, ChatModel, CostLedger, DemoEntry, LlmError, MockLlm,
    OpenAiClient, PromptMode, Provenance,
};
use crate::corpus::{self, CorpusError, CorpusSplit, Label, NewsRecord};
use crate::domainspace::{self, membership, DomainError, DomainSpace};
use crate::encoder::{build_encoder, EncoderError};
use crate::eval::{self, Confusion, EvalError};
use crate::model::{self, encode_checkpoint, ModelError};
use crate::sampler::{self, PoolItem, SamplerError, Strategy};
use crate::util::{ceil_tolerant, stable_hash};
use crate::verifier::{self, NoiseReport, VerifierError};

/// Improvement below this is treated as none, so that a gain of exactly
/// `min_delta` (up to rounding) does not count.
const PLATEAU_TOLERANCE: f64 = 1e-12;

/// Demonstrations shown next to each review task.
const TASK_NEIGHBORS: usize = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("i/o error on {}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("corrupt state file: {0}")]
    CorruptState(String),
    #[error("unsupported state file version {0}")]
    StateVersion(u64),
    #[error("state does not belong to this corpus: {0}")]
    StateMismatch(String),
    #[error("record {0:?} does not exist")]
    UnknownRecord(String),
    #[error("record {0:?} is not in the human review queue")]
    NotInQueue(String),
    #[error("record {id:?} already has human label {existing}, refusing {submitted}")]
    Conflict { id: String, existing: Label, submitted: Label },
    #[error("run is {0:?}, not awaiting human labels")]
    NotAwaiting(Status),
    #[error("internal state error: {0}")]
    Internal(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Annotator(#[from] AnnotatorError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub text: String,
    pub label: Label,
}

/// One record awaiting human review, as shown to annotators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub record_id: String,
    pub text: String,
    /// `None` when the LLM abstained.
    pub llm_label: Option<Label>,
    /// Probe probability of the LLM label.
    pub probe_self_probability: Option<f64>,
    pub neighbors: Vec<Neighbor>,
    /// 1-based position in the round's review queue.
    pub flagged_rank: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanLabelOutcome {
    /// False for an identical resubmission.
    pub applied: bool,
    pub remaining: usize,
    pub status: Status,
}

/// Why a run stops after its latest completed round, if it does.
///
/// The plateau rule counts trailing rounds whose validation macro-F1 failed
/// to beat the best earlier value by more than `min_delta`.
pub fn should_stop(state: &RunState, stop: &StopConfig) -> Option<StopReason> {
    if state.round >= stop.max_rounds {
        return Some(StopReason::MaxRounds);
    }
    if state.pool_remaining.is_empty() {
        return Some(StopReason::PoolExhausted);
    }
    let f1: Vec<f64> = state.rounds.iter().map(|r| r.val_macro_f1).collect();
    if stop.patience > 0 && plateau_length(&f1, stop.min_delta) >= stop.patience {
        return Some(StopReason::Plateau);
    }
    None
}

/// Number of trailing entries that did not improve on the running best.
pub fn plateau_length(f1: &[f64], min_delta: f64) -> usize {
    let Some((&first, rest)) = f1.split_first() else {
        return 0;
    };
    let mut best = first;
    let mut stale = 0;
    for &f in rest {
        if f - best > min_delta + PLATEAU_TOLERANCE {
            stale = 0;
        } else {
            stale += 1;
        }
        best = best.max(f);
    }
    stale
}

fn stage_seed(seed: u64, stage: &str, round: usize) -> u64 {
    stable_hash(&[&seed.to_le_bytes(), stage.as_bytes(), &(round as u64).to_le_bytes()])
}

pub fn load_corpus(config: &CorpusConfig) -> Result<Vec<NewsRecord>, PipelineError> {
    if config.files.is_empty() {
        let spec = config
            .synth
            .as_ref()
            .ok_or_else(|| PipelineError::Config("corpus needs files or a synth spec".into()))?;
        return Ok(corpus::synth_corpus_detailed(spec)?.records);
    }
    let mut out = Vec::new();
    for f in &config.files {
        if !f.path.is_file() {
            return Err(PipelineError::MissingFile(f.path.clone()));
        }
        out.extend(corpus::load_jsonl(&f.path, &f.source)?);
    }
    Ok(out)
}

pub fn build_llm(config: &RunConfig, records: &[NewsRecord]) -> Result<Box<dyn ChatModel>, PipelineError> {
    Ok(match config.llm.backend {
        LlmBackend::Mock => Box::new(MockLlm::new(
            records,
            config.llm.accuracy,
            config.llm.knn_accuracy,
            config.seed,
        )),
        LlmBackend::Openai => Box::new(OpenAiClient::from_env(config.llm.endpoint.clone())?),
    })
}

pub struct Pipeline {
    config: RunConfig,
    records: BTreeMap<String, NewsRecord>,
    split: CorpusSplit,
    embeddings: BTreeMap<String, Vec<f64>>,
    llm: Box<dyn ChatModel>,
    artifacts: Option<PathBuf>,
}

impl Pipeline {
    /// Loads the corpus, splits it, embeds every record and connects the
    /// configured LLM backend.
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let records = load_corpus(&config.corpus)?;
        let llm = build_llm(&config, &records)?;
        Self::from_records(config, records, llm)
    }

    pub fn with_llm(config: RunConfig, llm: Box<dyn ChatModel>) -> Result<Self, PipelineError> {
        config.validate()?;
        let records = load_corpus(&config.corpus)?;
        Self::from_records(config, records, llm)
    }

    fn from_records(
        config: RunConfig,
        records: Vec<NewsRecord>,
        llm: Box<dyn ChatModel>,
    ) -> Result<Self, PipelineError> {
        let split = corpus::split(&records, &config.corpus.split)?;
        if let Some(r) = split.demo.iter().chain(&split.test).find(|r| r.gold_label.is_none()) {
            return Err(PipelineError::Config(format!(
                "record {:?} is a demonstration or test record without a label",
                r.id
            )));
        }
        let encoder = build_encoder(&config.encoder)?;
        let texts: Vec<&str> = records.iter().map(|r| r.text.as_str()).collect();
        let vectors = encoder.embed_batch(&texts)?;
        let embeddings = records
            .iter()
            .zip(vectors)
            .map(|(r, v)| (r.id.clone(), v.into_inner()))
            .collect();
        let records = records.into_iter().map(|r| (r.id.clone(), r)).collect();
        Ok(Pipeline {
            config,
            records,
            split,
            embeddings,
            llm,
            artifacts: None,
        })
    }

    /// Directory for classifier checkpoints written after each round.
    pub fn with_artifacts(mut self, dir: impl Into<PathBuf>) -> Self {
        self.artifacts = Some(dir.into());
        self
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn split(&self) -> &CorpusSplit {
        &self.split
    }

    pub fn record(&self, id: &str) -> Option<&NewsRecord> {
        self.records.get(id)
    }

    pub fn init_state(&self) -> RunState {
        let demo: BTreeMap<String, Label> = self
            .split
            .demo
            .iter()
            .map(|r| (r.id.clone(), r.gold_label.expect("checked at construction")))
            .collect();
        RunState {
            run_id: self.config.run_id.clone(),
            round: 0,
            status: Status::Sampling,
            stop_reason: None,
            labelled: BTreeMap::new(),
            pool_remaining: self.split.pool.iter().map(|r| r.id.clone()).collect(),
            initial_demo_size: demo.len(),
            demo,
            rounds: Vec::new(),
            pending: None,
            ledger: CostLedger::default(),
            domain_space: None,
            pool_probs: BTreeMap::new(),
            checkpoint: None,
        }
    }

    /// Rejects a (loaded) state that references records outside this corpus.
    pub fn check_state(&self, state: &RunState) -> Result<(), PipelineError> {
        state.check_invariants().map_err(PipelineError::StateMismatch)?;
        let ids = state
            .labelled
            .keys()
            .chain(&state.pool_remaining)
            .chain(state.demo.keys())
            .chain(state.pending.iter().flat_map(|p| &p.selected));
        for id in ids {
            if !self.records.contains_key(id) {
                return Err(PipelineError::StateMismatch(format!("unknown record {id:?}")));
            }
        }
        Ok(())
    }

    fn embedding(&self, id: &str) -> &[f64] {
        &self.embeddings[id]
    }

    fn demo_entries(&self, state: &RunState) -> Vec<DemoEntry> {
        state
            .demo
            .iter()
            .map(|(id, &label)| DemoEntry {
                id: id.clone(),
                text: self.records[id].text.clone(),
                label,
                embedding: self.embeddings[id].clone(),
            })
            .collect()
    }

    /// Performs the next stage. In `awaiting_human` this only moves on once
    /// the queue has drained.
    pub fn advance(&self, state: &mut RunState) -> Result<(), PipelineError> {
        match state.status {
            Status::Sampling => self.sample(state),
            Status::Annotating => self.annotate(state),
            Status::AwaitingHuman => {
                if state.open_queue().is_empty() {
                    state.status = Status::Training;
                }
                Ok(())
            }
            Status::Training => self.train(state),
            Status::Done => Ok(()),
        }
    }

    /// Advances until the round completes, the run waits for humans, or it ends.
    pub fn run_round(&self, state: &mut RunState) -> Result<(), PipelineError> {
        let start = state.round;
        while state.round == start && !matches!(state.status, Status::Done | Status::AwaitingHuman) {
            self.advance(state)?;
        }
        Ok(())
    }

    /// Runs rounds until the stop rule fires or human input is needed. With
    /// `state_path` set the state is saved after every stage.
    pub fn run(&self, state: &mut RunState, state_path: Option<&Path>) -> Result<(), PipelineError> {
        while !matches!(state.status, Status::Done | Status::AwaitingHuman) {
            self.advance(state)?;
            if let Some(p) = state_path {
                state.save(p)?;
            }
        }
        Ok(())
    }

    fn fit_space(&self, previous: Option<&DomainSpace>, state: &RunState) -> Result<DomainSpace, PipelineError> {
        let ids: Vec<String> = state
            .pool_remaining
            .iter()
            .chain(state.labelled.keys())
            .cloned()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let vectors: Vec<Vec<f64>> = ids.iter().map(|id| self.embeddings[id].clone()).collect();
        let seed = stage_seed(self.config.seed, "pipeline/domain", state.round);
        Ok(domainspace::refit(previous, &ids, &vectors, &self.config.domain, seed)?)
    }

    fn sample(&self, state: &mut RunState) -> Result<(), PipelineError> {
        if state.pool_remaining.is_empty() {
            state.status = Status::Done;
            state.stop_reason = Some(StopReason::PoolExhausted);
            return Ok(());
        }
        let space = match &state.domain_space {
            Some(s) => s.clone(),
            None => self.fit_space(None, state)?,
        };
        let items: Vec<PoolItem<'_>> = state
            .pool_remaining
            .iter()
            .map(|id| PoolItem {
                id,
                embedding: self.embedding(id),
            })
            .collect();
        let cfg = &self.config.sampling;
        let budget = cfg.per_round.min(items.len());
        let seed = stage_seed(self.config.seed, "pipeline/sample", state.round);
        let first = state.round == 0;
        let result = match cfg.strategy {
            Strategy::DomainAware => {
                let weights = sampler::cluster_weights(&space, &items, cfg.epsilon)?;
                let allocation = sampler::allocate(budget, &weights, &sampler::capacities(&space, &items))?;
                if first {
                    sampler::cold_start_select(&space, &items, &allocation)?
                } else {
                    sampler::entropy_select(&space, &items, &allocation, &state.pool_probs)?
                }
            }
            // Uncertainty baselines have no classifier before round one.
            Strategy::MaxEntropy | Strategy::LeastConfidence if first => {
                sampler::baseline_select(Strategy::Random, &items, budget, None, seed)?
            }
            s => sampler::baseline_select(s, &items, budget, Some(&state.pool_probs), seed)?,
        };
        if result.selected_ids.len() != budget {
            return Err(PipelineError::Internal(format!(
                "sampler returned {} of {budget} records",
                result.selected_ids.len()
            )));
        }
        state.domain_space = Some(space);
        state.pending = Some(PendingRound {
            selected: result.selected_ids,
            strategy: Some(result.strategy),
            ..PendingRound::default()
        });
        state.status = Status::Annotating;
        Ok(())
    }

    fn annotate(&self, state: &mut RunState) -> Result<(), PipelineError> {
        let mut pending = state
            .pending
            .clone()
            .ok_or_else(|| PipelineError::Internal("annotating without a selection".into()))?;
        let demos = self.demo_entries(state);
        let annotator = Annotator::new(self.llm.as_ref(), self.config.annotator.annotator_config());
        let items: Vec<(&NewsRecord, &[f64])> = pending
            .selected
            .iter()
            .map(|id| (&self.records[id], self.embedding(id)))
            .collect();
        let mut ledger = state.ledger.clone();
        let annotations = annotator.annotate_batch(&items, &demos, &mut ledger)?;

        // The probe is trained on everything labelled so far plus the new
        // LLM labels, but only new LLM labels are candidates for review.
        let mut ids: Vec<&str> = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        for (id, ex) in &state.labelled {
            ids.push(id);
            labels.push(ex.label.index());
        }
        let mut fresh: BTreeSet<&str> = BTreeSet::new();
        let mut abstained: Vec<String> = Vec::new();
        for a in &annotations {
            match a.label {
                Some(l) => {
                    ids.push(&a.record_id);
                    labels.push(l.index());
                    fresh.insert(&a.record_id);
                }
                None => abstained.push(a.record_id.clone()),
            }
        }
        abstained.sort();
        let texts: Vec<&str> = ids.iter().map(|id| self.records[*id].text.as_str()).collect();
        let seed = stage_seed(self.config.seed, "pipeline/verify", state.round);
        let rho = self.config.annotator.rho;
        let (mut report, probs) =
            match verifier::verify(&ids, &texts, &labels, 2, &self.config.verifier, rho, seed) {
                Ok(r) => r,
                Err(VerifierError::ClassTooSmall { class, count, needed }) => {
                    tracing::warn!(class, count, needed, "too few labels per class, skipping verification");
                    (NoiseReport::empty(2), Vec::new())
                }
                Err(e) => return Err(e.into()),
            };
        for (i, id) in ids.iter().enumerate() {
            if fresh.contains(id) {
                if let Some(p) = probs.get(i) {
                    pending.probe_p_fake.insert(id.to_string(), p[Label::Fake.index()]);
                }
            }
        }
        let (flagged, self_prob): (Vec<String>, Vec<f64>) = report
            .flagged
            .iter()
            .zip(&report.flagged_self_prob)
            .filter(|(id, _)| fresh.contains(id.as_str()))
            .map(|(id, p)| (id.clone(), *p))
            .unzip();
        let mut queue: Vec<String> = flagged[..ceil_tolerant(rho * flagged.len() as f64)].to_vec();
        queue.extend(abstained);
        report.flagged = flagged;
        report.flagged_self_prob = self_prob;
        report.human_queue = queue.clone();

        pending.flagged = report.flagged.len();
        pending.noise = Some(report);
        pending.human_queue = queue;
        pending.annotations = annotations;
        state.ledger = ledger;
        state.pending = Some(pending);
        let queue_empty = state.pending.as_ref().is_some_and(|p| p.human_queue.is_empty());
        state.status = if queue_empty {
            Status::Training
        } else {
            match self.config.human.mode {
                HumanMode::Oracle => {
                    self.answer_from_gold(state);
                    Status::Training
                }
                HumanMode::Interactive => Status::AwaitingHuman,
            }
        };
        Ok(())
    }

    /// Oracle mode: gold labels stand in for the human annotator.
    fn answer_from_gold(&self, state: &mut RunState) {
        let queue = state.pending.as_ref().map(|p| p.human_queue.clone()).unwrap_or_default();
        for id in queue {
            if let Some(gold) = self.records[&id].gold_label {
                self.record_human(state, &id, gold, "oracle");
            }
        }
    }

    fn record_human(&self, state: &mut RunState, id: &str, label: Label, annotator: &str) {
        state.ledger.record_human(estimate_tokens(&self.records[id].text));
        if let Some(p) = state.pending.as_mut() {
            p.human_done.insert(
                id.to_string(),
                HumanLabel {
                    label,
                    annotator: annotator.to_string(),
                },
            );
        }
    }

    /// Submits a human label for a queued record. An identical resubmission
    /// is a no-op; a different label for an already labelled record is a
    /// conflict. Draining the queue moves the run on to training.
    pub fn apply_human_label(
        &self,
        state: &mut RunState,
        record_id: &str,
        label: Label,
        annotator: &str,
    ) -> Result<HumanLabelOutcome, PipelineError> {
        if !self.records.contains_key(record_id) {
            return Err(PipelineError::UnknownRecord(record_id.to_string()));
        }
        let existing = state
            .pending
            .as_ref()
            .and_then(|p| p.human_done.get(record_id).map(|h| h.label))
            .or_else(|| {
                state
                    .labelled
                    .get(record_id)
                    .filter(|ex| ex.provenance == Provenance::Human)
                    .map(|ex| ex.label)
            });
        if let Some(existing) = existing {
            if existing != label {
                return Err(PipelineError::Conflict {
                    id: record_id.to_string(),
                    existing,
                    submitted: label,
                });
            }
            return Ok(HumanLabelOutcome {
                applied: false,
                remaining: state.open_queue().len(),
                status: state.status,
            });
        }
        if state.status != Status::AwaitingHuman {
            return Err(PipelineError::NotAwaiting(state.status));
        }
        if !state.open_queue().contains(&record_id) {
            return Err(PipelineError::NotInQueue(record_id.to_string()));
        }
        self.record_human(state, record_id, label, annotator);
        let remaining = state.open_queue().len();
        if remaining == 0 {
            state.status = Status::Training;
        }
        Ok(HumanLabelOutcome {
            applied: true,
            remaining,
            status: state.status,
        })
    }

    /// Gives up on the open queue: unreviewed records keep their LLM label.
    pub fn abandon_human_queue(&self, state: &mut RunState) {
        if state.status == Status::AwaitingHuman {
            state.status = Status::Training;
        }
    }

    /// Open review tasks, in queue order. Empty unless awaiting humans.
    pub fn tasks(&self, state: &RunState) -> Vec<AnnotationTask> {
        let Some(pending) = &state.pending else {
            return Vec::new();
        };
        let open: BTreeSet<&str> = state.open_queue().into_iter().collect();
        if open.is_empty() {
            return Vec::new();
        }
        let demos = self.demo_entries(state);
        pending
            .human_queue
            .iter()
            .enumerate()
            .filter(|(_, id)| open.contains(id.as_str()))
            .map(|(rank, id)| {
                let llm_label = pending
                    .annotations
                    .iter()
                    .find(|a| &a.record_id == id)
                    .and_then(|a| a.label);
                let probe_self_probability = match (llm_label, pending.probe_p_fake.get(id)) {
                    (Some(Label::Fake), Some(&p)) => Some(p),
                    (Some(Label::Real), Some(&p)) => Some(1.0 - p),
                    _ => None,
                };
                let neighbors = retrieve_demos(self.embedding(id), &demos, TASK_NEIGHBORS)
                    .map(|ds| {
                        ds.into_iter()
                            .map(|d| Neighbor {
                                text: d.text.clone(),
                                label: d.label,
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                AnnotationTask {
                    record_id: id.clone(),
                    text: self.records[id].text.clone(),
                    llm_label,
                    probe_self_probability,
                    neighbors,
                    flagged_rank: rank + 1,
                }
            })
            .collect()
    }

    fn features(&self, ids: &[&str], space: &DomainSpace) -> Result<(Array2<f64>, Array2<f64>), PipelineError> {
        let dim = self.embeddings.values().next().map_or(0, Vec::len);
        let mut x = Array2::zeros((ids.len(), dim));
        let mut dom = Array2::zeros((ids.len(), space.k));
        for (i, id) in ids.iter().enumerate() {
            let e = self.embedding(id);
            for (j, v) in e.iter().enumerate() {
                x[[i, j]] = *v;
            }
            for (j, p) in membership(e, space)?.probs.into_iter().enumerate() {
                dom[[i, j]] = p;
            }
        }
        Ok((x, dom))
    }

    fn train(&self, state: &mut RunState) -> Result<(), PipelineError> {
        let pending = state
            .pending
            .clone()
            .ok_or_else(|| PipelineError::Internal("training without a round in progress".into()))?;
        let round = state.round + 1;
        let mut labelled = state.labelled.clone();
        let mut pool = state.pool_remaining.clone();
        let mut shortfall = 0;
        for a in &pending.annotations {
            let human = pending.human_done.get(&a.record_id);
            let (label, provenance) = match (human, a.label) {
                (Some(h), _) => (h.label, Provenance::Human),
                (None, Some(l)) => (l, Provenance::Llm),
                // Abstained and never reviewed: back to the pool.
                (None, None) => continue,
            };
            let p_fake = pending.probe_p_fake.get(&a.record_id);
            labelled.insert(
                a.record_id.clone(),
                LabeledExample {
                    id: a.record_id.clone(),
                    label,
                    provenance,
                    llm_label: a.label,
                    probe_self_prob: p_fake.map(|&p| if label == Label::Fake { p } else { 1.0 - p }),
                    round,
                    annotator: human.map(|h| h.annotator.clone()),
                },
            );
            pool.remove(&a.record_id);
        }
        for id in &pending.human_queue {
            if !pending.human_done.contains_key(id) {
                shortfall += 1;
            }
        }

        let mut next = RunState {
            labelled,
            pool_remaining: pool,
            ..state.clone()
        };
        let space = self.fit_space(next.domain_space.as_ref(), &next)?;
        let ids: Vec<&str> = next.labelled.keys().map(String::as_str).collect();
        let labels: Vec<Label> = next.labelled.values().map(|e| e.label).collect();
        let (x, dom) = self.features(&ids, &space)?;
        let seed = stage_seed(self.config.seed, "pipeline/model", state.round);
        let (mut clf, fit) = model::fit(&self.config.model, &x, &labels, &dom, seed)?;
        clf.round = round as u64;

        let test_ids: Vec<&str> = self.split.test.iter().map(|r| r.id.as_str()).collect();
        let test_p = clf.predict(&self.features(&test_ids, &space)?.0)?;
        let p_fake: BTreeMap<String, f64> = test_ids.iter().map(|s| s.to_string()).zip(test_p).collect();
        let per_source = eval::evaluate(&self.split.test, &p_fake)?;

        let train_p = clf.predict(&x)?;
        let mut val: BTreeMap<&str, Confusion> = BTreeMap::new();
        for &i in &fit.val_indices {
            val.entry(&self.records[ids[i]].source)
                .or_default()
                .add(labels[i], Label::from_bool(train_p[i] >= 0.5));
        }
        let val_macro_f1 = if val.is_empty() {
            0.0
        } else {
            val.values().map(Confusion::f1).sum::<f64>() / val.len() as f64
        };

        let pool_ids: Vec<&str> = next.pool_remaining.iter().map(String::as_str).collect();
        next.pool_probs = if pool_ids.is_empty() {
            BTreeMap::new()
        } else {
            let p = clf.predict(&self.features(&pool_ids, &space)?.0)?;
            pool_ids.iter().map(|s| s.to_string()).zip(p).collect()
        };

        if self.config.demo_growth.enabled {
            let added = self.demo_additions(&next, &ids, &labels, train_p.as_slice().expect("contiguous"));
            next.demo.extend(added);
        }

        if let Some(dir) = &self.artifacts {
            let name = format!("checkpoint-r{round}.bin");
            let path = dir.join(&name);
            std::fs::write(&path, encode_checkpoint(&clf)).map_err(|e| PipelineError::Io { path, message: e.to_string() })?;
            next.checkpoint = Some(name);
        }

        let last = fit.history.get(fit.best_epoch.saturating_sub(1)).or(fit.history.last());
        let human_labeled = pending.human_done.len();
        let macro_f1 = eval::macro_f1(&per_source);
        next.rounds.push(RoundRecord {
            metrics: RoundMetrics {
                round,
                per_source,
                macro_f1,
                cost: next.ledger.cost(),
                flagged: pending.flagged,
                human_labeled,
            },
            strategy: pending
                .strategy
                .ok_or_else(|| PipelineError::Internal("round without a strategy".into()))?,
            selected: pending.selected.len(),
            labelled_total: next.labelled.len(),
            val_macro_f1,
            loss: last.map(|e| e.loss).unwrap_or_default(),
            best_epoch: fit.best_epoch,
            noise: pending.noise.clone(),
            k: space.k,
            silhouette: space.silhouette,
            demo_size: next.demo.len(),
            human_shortfall: shortfall,
        });
        tracing::info!(round, macro_f1, val_macro_f1, k = space.k, "round complete");
        next.domain_space = Some(space);
        next.round = round;
        next.pending = None;
        next.status = Status::Sampling;
        if let Some(reason) = should_stop(&next, &self.config.stop) {
            next.status = Status::Done;
            next.stop_reason = Some(reason);
        }
        *state = next;
        Ok(())
    }

    /// Adds labelled records to the demonstration set when the classifier is
    /// confident and agrees with both the assigned label and the probe.
    fn demo_additions(&self, state: &RunState, ids: &[&str], labels: &[Label], p_fake: &[f64]) -> Vec<(String, Label)> {
        let cfg = &self.config.demo_growth;
        let cap = (cfg.max_factor * state.initial_demo_size as f64).floor() as usize;
        if state.demo.len() >= cap {
            return Vec::new();
        }
        let mut candidates: Vec<(f64, &str, Label)> = Vec::new();
        for ((id, &label), &p) in ids.iter().zip(labels).zip(p_fake) {
            let ex = &state.labelled[*id];
            let confidence = p.max(1.0 - p);
            let agrees = Label::from_bool(p >= 0.5) == label && ex.probe_self_prob.is_some_and(|q| q > 0.5);
            if confidence >= cfg.min_confidence && agrees && !state.demo.contains_key(*id) {
                candidates.push((confidence, id, label));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(b.1)));
        let room = cap - state.demo.len();
        candidates
            .into_iter()
            .take(room)
            .map(|(_, id, label)| (id.to_string(), label))
            .collect()
    }

    /// The LLM as a direct classifier of the test split, with the initial
    /// demonstration set. Abstentions count as `real`.
    pub fn detect_metrics(&self, mode: PromptMode) -> Result<RoundMetrics, PipelineError> {
        let state = self.init_state();
        let demos = self.demo_entries(&state);
        let annotator = Annotator::new(self.llm.as_ref(), self.config.annotator.annotator_config());
        let mut ledger = CostLedger::default();
        let mut p_fake = BTreeMap::new();
        for r in &self.split.test {
            let a = annotator.annotate_with_mode(r, self.embedding(&r.id), &demos, mode)?;
            ledger.record_llm(a.prompt_tokens, a.completion_tokens);
            let p = if a.label == Some(Label::Fake) { 1.0 } else { 0.0 };
            p_fake.insert(r.id.clone(), p);
        }
        let per_source = eval::evaluate(&self.split.test, &p_fake)?;
        Ok(RoundMetrics {
            round: 0,
            macro_f1: eval::macro_f1(&per_source),
            per_source,
            cost: ledger.cost(),
            flagged: 0,
            human_labeled: 0,
        })
    }
}

/// Final-round metrics of a finished state, if any round completed.
pub fn final_metrics(state: &RunState) -> Option<&RoundMetrics> {
    state.rounds.last().map(|r| &r.metrics)
}
