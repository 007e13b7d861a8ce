//! Run configuration: a JSON document with defaults for every key, plus
//! dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::PipelineError;
use crate::annotator::{AnnotatorConfig, LlmEndpoint, PromptMode};
use crate::corpus::{SplitSpec, SynthSpec};
use crate::domainspace::ClusterOptions;
use crate::encoder::EncoderConfig;
use crate::model::ModelConfig;
use crate::sampler::{Strategy, DEFAULT_EPSILON};
use crate::verifier::ProbeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusFile {
    pub path: PathBuf,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// JSONL files, one source tag each.
    pub files: Vec<CorpusFile>,
    /// Synthetic corpus used when no files are given.
    pub synth: Option<SynthSpec>,
    pub split: SplitSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub strategy: Strategy,
    /// Records acquired per round (M).
    pub per_round: usize,
    pub epsilon: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            strategy: Strategy::DomainAware,
            per_round: 120,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotatorSection {
    pub k: usize,
    pub mode: PromptMode,
    pub parallelism: usize,
    /// Fraction of flagged labels routed to human review.
    pub rho: f64,
}

impl Default for AnnotatorSection {
    fn default() -> Self {
        let a = AnnotatorConfig::default();
        AnnotatorSection {
            k: a.k,
            mode: a.mode,
            parallelism: a.parallelism,
            rho: 0.2,
        }
    }
}

impl AnnotatorSection {
    pub fn annotator_config(&self) -> AnnotatorConfig {
        AnnotatorConfig {
            k: self.k,
            mode: self.mode,
            parallelism: self.parallelism,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmBackend {
    /// Offline stand-in answering from gold labels.
    Mock,
    /// Any OpenAI-compatible chat-completions endpoint.
    Openai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub backend: LlmBackend,
    /// Mock: probability of answering with the gold label.
    pub accuracy: f64,
    /// Mock: accuracy when a same-source demonstration is in the prompt.
    pub knn_accuracy: Option<f64>,
    pub endpoint: LlmEndpoint,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            backend: LlmBackend::Mock,
            accuracy: 0.85,
            knn_accuracy: None,
            endpoint: LlmEndpoint {
                base_url: "https://api.openai.com/v1".into(),
                model: "gpt-3.5-turbo".into(),
                max_retries: 2,
                backoff_ms: 500,
                timeout_s: 60,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HumanMode {
    /// Gold labels answer the queue immediately.
    Oracle,
    /// The queue waits for labels submitted through the service.
    Interactive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HumanConfig {
    pub mode: HumanMode,
    /// Interactive only: give up on the queue after this many seconds.
    pub timeout_s: Option<u64>,
}

impl Default for HumanConfig {
    fn default() -> Self {
        HumanConfig {
            mode: HumanMode::Oracle,
            timeout_s: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopConfig {
    pub max_rounds: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for StopConfig {
    fn default() -> Self {
        StopConfig {
            max_rounds: 10,
            patience: 2,
            min_delta: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemoGrowthConfig {
    pub enabled: bool,
    /// Minimum classifier confidence max(p, 1 - p).
    pub min_confidence: f64,
    /// Cap on the demonstration set relative to its initial size.
    pub max_factor: f64,
}

impl Default for DemoGrowthConfig {
    fn default() -> Self {
        DemoGrowthConfig {
            enabled: true,
            min_confidence: 0.95,
            max_factor: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    /// When set, requests must carry it in the `x-coalfake-token` header.
    pub token: Option<String>,
    /// Origins allowed by CORS; empty allows any origin.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            token: None,
            cors_origins: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_id: String,
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub domain: ClusterOptions,
    pub sampling: SamplingConfig,
    pub annotator: AnnotatorSection,
    pub llm: LlmConfig,
    pub human: HumanConfig,
    pub verifier: ProbeConfig,
    pub model: ModelConfig,
    pub stop: StopConfig,
    pub demo_growth: DemoGrowthConfig,
    pub service: ServiceConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            seed: 0,
            corpus: CorpusConfig::default(),
            encoder: EncoderConfig::default(),
            domain: ClusterOptions::default(),
            sampling: SamplingConfig::default(),
            annotator: AnnotatorSection::default(),
            llm: LlmConfig::default(),
            human: HumanConfig::default(),
            verifier: ProbeConfig::default(),
            model: ModelConfig::default(),
            stop: StopConfig::default(),
            demo_growth: DemoGrowthConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl RunConfig {
    /// The small synthetic benchmark: three topical domains, the last one
    /// five times rarer, a mock LLM that is right 85% of the time, an oracle
    /// human, and a classifier sized to train in seconds.
    pub fn synth_benchmark(seed: u64) -> Self {
        let mut synth = SynthSpec::uniform(3, 900, 0.0, seed);
        synth.sizes = vec![900, 900, 180];
        synth.domain_cue_prob = 0.9;
        let mut c = RunConfig {
            run_id: "synth".into(),
            seed,
            ..RunConfig::default()
        };
        c.corpus.synth = Some(synth);
        c.corpus.split = SplitSpec {
            demo_per_source: 10,
            pool_frac: 0.6,
            seed,
        };
        c.encoder.dim = 128;
        c.encoder.seed = seed;
        c.domain.k_max = 6;
        c.stop.max_rounds = 5;
        c.stop.patience = 0;
        c.model = ModelConfig {
            d: 32,
            heads: 4,
            hidden: Some(32),
            lr_generator: 3e-3,
            lr_domain_classifier: 1e-4,
            epochs: 40,
            batch: 32,
            ..ModelConfig::default()
        };
        c
    }

    /// Sets the run seed and every per-module seed derived from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.corpus.split.seed = seed;
        self.encoder.seed = seed;
        if let Some(synth) = &mut self.corpus.synth {
            synth.seed = seed;
        }
        self
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|_| PipelineError::MissingFile(path.to_path_buf()))?;
        let mut config = Self::from_json(&text)?;
        // Relative corpus paths are relative to the config file.
        if let Some(dir) = path.parent() {
            for f in &mut config.corpus.files {
                if f.path.is_relative() {
                    f.path = dir.join(&f.path);
                }
            }
        }
        Ok(config)
    }

    /// Applies `key=value` overrides with dotted keys. The value is parsed as
    /// JSON when possible and taken as a string otherwise. Keys must name an
    /// existing setting.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, PipelineError> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| PipelineError::Config(format!("override {raw:?} is not key=value")))?;
            set_dotted(&mut doc, key.trim(), parse_value(value))?;
        }
        serde_json::from_value(doc).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(0.0..=1.0).contains(&self.annotator.rho) {
            return bad(format!("annotator.rho must lie in [0, 1], got {}", self.annotator.rho));
        }
        if self.sampling.per_round == 0 {
            return bad("sampling.per_round must be positive".into());
        }
        if self.annotator.k == 0 {
            return bad("annotator.k must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.llm.accuracy) {
            return bad("llm.accuracy must lie in [0, 1]".into());
        }
        if self.corpus.files.is_empty() && self.corpus.synth.is_none() {
            return bad("corpus needs files or a synth spec".into());
        }
        if self.stop.max_rounds == 0 {
            return bad("stop.max_rounds must be positive".into());
        }
        for f in &self.corpus.files {
            if !f.path.is_file() {
                return Err(PipelineError::MissingFile(f.path.clone()));
            }
        }
        self.model.validate().map_err(|e| PipelineError::Config(e.to_string()))
    }
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_dotted(doc: &mut Value, key: &str, value: Value) -> Result<(), PipelineError> {
    let unknown = || PipelineError::Config(format!("unknown config key {key:?}"));
    if key.is_empty() {
        return Err(unknown());
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = doc;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        // Numeric segments index into existing arrays, e.g. `model.lambdas.3`.
        if let Value::Array(items) = node {
            let slot = part.parse::<usize>().ok().and_then(|j| items.get_mut(j)).ok_or_else(unknown)?;
            if last {
                *slot = value;
                return Ok(());
            }
            node = slot;
            continue;
        }
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node.as_object_mut().ok_or_else(unknown)?;
        // Under a null (unset optional) section any key may be created; the
        // typed decode afterwards rejects fields that do not exist.
        let creating = obj.is_empty();
        if last {
            if !obj.contains_key(*part) && !creating {
                return Err(unknown());
            }
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        if !obj.contains_key(*part) {
            if !creating {
                return Err(unknown());
            }
            obj.insert(part.to_string(), Value::Null);
        }
        node = obj.get_mut(*part).expect("present");
    }
    Ok(())
}
