//! LLM annotation with k-NN few-shot prompts, cost accounting, and the
//! LLM-as-detector baseline.

pub mod ledger;
pub mod llm;
pub mod prompt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ledger::{estimate_tokens, Cost, CostLedger, CostRates};
pub use llm::{ChatModel, Completion, LlmEndpoint, LlmError, MockLlm, OpenAiClient};
pub use prompt::{build_prompt, parse_label, Demonstration, PromptMode};

use crate::corpus::{Label, NewsRecord};
use crate::util::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Llm,
    Human,
    Gold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub record_id: String,
    /// `None` when the completion could not be parsed even after a reprompt.
    pub label: Option<Label>,
    pub provenance: Provenance,
    pub raw_response: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Annotation {
    pub fn abstained(&self) -> bool {
        self.label.is_none()
    }
}

/// A demonstration candidate with its (unit-norm) embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoEntry {
    pub id: String,
    pub text: String,
    pub label: Label,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Error)]
pub enum AnnotatorError {
    #[error("demonstration set is empty")]
    EmptyDemoSet,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

/// The `min(k, |demos|)` demonstrations most cosine-similar to the query,
/// in descending similarity (ties by id).
pub fn retrieve_demos<'a>(
    query: &[f64],
    demos: &'a [DemoEntry],
    k: usize,
) -> Result<Vec<&'a DemoEntry>, AnnotatorError> {
    if demos.is_empty() {
        return Err(AnnotatorError::EmptyDemoSet);
    }
    let qn = dot(query, query).sqrt();
    let mut scored: Vec<(f64, &DemoEntry)> = demos
        .iter()
        .map(|d| {
            let dn = dot(&d.embedding, &d.embedding).sqrt();
            let sim = if qn > 0.0 && dn > 0.0 {
                dot(query, &d.embedding) / (qn * dn)
            } else {
                f64::NEG_INFINITY
            };
            (sim, d)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
    Ok(scored.into_iter().take(k).map(|(_, d)| d).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorConfig {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_mode")]
    pub mode: PromptMode,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_k() -> usize {
    5
}
fn default_mode() -> PromptMode {
    PromptMode::Knn
}
fn default_parallelism() -> usize {
    1
}

impl Default for AnnotatorConfig {
    fn default() -> Self {
        AnnotatorConfig {
            k: default_k(),
            mode: default_mode(),
            parallelism: default_parallelism(),
        }
    }
}

pub struct Annotator<'a> {
    llm: &'a dyn ChatModel,
    config: AnnotatorConfig,
}

impl<'a> Annotator<'a> {
    pub fn new(llm: &'a dyn ChatModel, config: AnnotatorConfig) -> Self {
        Annotator { llm, config }
    }

    pub fn prompt_for(
        &self,
        text: &str,
        embedding: &[f64],
        demos: &[DemoEntry],
        mode: PromptMode,
    ) -> Result<String, AnnotatorError> {
        let shots: Vec<Demonstration> = match mode {
            PromptMode::Knn => retrieve_demos(embedding, demos, self.config.k)?
                .into_iter()
                .map(|d| Demonstration {
                    text: d.text.clone(),
                    label: d.label,
                })
                .collect(),
            PromptMode::Plain => Vec::new(),
        };
        Ok(build_prompt(&shots, text, mode).ok_or(AnnotatorError::EmptyDemoSet)?)
    }

    /// Labels one record. Usage of every call (including a reprompt) is
    /// included in the returned token counts; the caller charges the ledger.
    pub fn annotate_with_mode(
        &self,
        record: &NewsRecord,
        embedding: &[f64],
        demos: &[DemoEntry],
        mode: PromptMode,
    ) -> Result<Annotation, AnnotatorError> {
        let prompt = self.prompt_for(&record.text, embedding, demos, mode)?;
        let first = self.llm.complete(&prompt)?;
        let mut annotation = Annotation {
            record_id: record.id.clone(),
            label: parse_label(&first.text),
            provenance: Provenance::Llm,
            raw_response: first.text,
            prompt_tokens: first.prompt_tokens,
            completion_tokens: first.completion_tokens,
        };
        if annotation.label.is_none() {
            let retry = self
                .llm
                .complete(&format!("{prompt}{}", prompt::REPROMPT_SUFFIX))?;
            annotation.label = parse_label(&retry.text);
            annotation.raw_response = retry.text;
            annotation.prompt_tokens += retry.prompt_tokens;
            annotation.completion_tokens += retry.completion_tokens;
        }
        Ok(annotation)
    }

    pub fn annotate(
        &self,
        record: &NewsRecord,
        embedding: &[f64],
        demos: &[DemoEntry],
        ledger: &mut CostLedger,
    ) -> Result<Annotation, AnnotatorError> {
        let a = self.annotate_with_mode(record, embedding, demos, self.config.mode)?;
        ledger.record_llm(a.prompt_tokens, a.completion_tokens);
        Ok(a)
    }

    /// Annotates a batch with up to `parallelism` concurrent calls. The ledger
    /// is charged in input order after all calls return.
    pub fn annotate_batch(
        &self,
        items: &[(&NewsRecord, &[f64])],
        demos: &[DemoEntry],
        ledger: &mut CostLedger,
    ) -> Result<Vec<Annotation>, AnnotatorError> {
        let workers = self.config.parallelism.max(1);
        let results: Vec<Result<Annotation, AnnotatorError>> = if workers == 1 || items.len() < 2 {
            items
                .iter()
                .map(|(r, e)| self.annotate_with_mode(r, e, demos, self.config.mode))
                .collect()
        } else {
            let chunk = items.len().div_ceil(workers);
            std::thread::scope(|scope| {
                let handles: Vec<_> = items
                    .chunks(chunk)
                    .map(|part| {
                        scope.spawn(move || {
                            part.iter()
                                .map(|(r, e)| self.annotate_with_mode(r, e, demos, self.config.mode))
                                .collect::<Vec<_>>()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .flat_map(|h| h.join().expect("annotation worker panicked"))
                    .collect()
            })
        };
        let annotations: Vec<Annotation> = results.into_iter().collect::<Result<_, _>>()?;
        for a in &annotations {
            ledger.record_llm(a.prompt_tokens, a.completion_tokens);
        }
        Ok(annotations)
    }

    /// The LLM used directly as a classifier; same code path as annotation.
    pub fn detect(
        &self,
        record: &NewsRecord,
        embedding: &[f64],
        demos: &[DemoEntry],
        mode: PromptMode,
    ) -> Result<Option<Label>, AnnotatorError> {
        Ok(self.annotate_with_mode(record, embedding, demos, mode)?.label)
    }
}
