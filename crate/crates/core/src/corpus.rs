//! News records, JSONL ingestion, demo/pool/test splitting, and synthetic
//! multi-domain corpora for desk-scale experiments.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::derive_rng;

/// Binary veracity label. `Fake` is the positive class (index 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        match i {
            0 => Some(Label::Real),
            1 => Some(Label::Fake),
            _ => None,
        }
    }

    pub fn from_bool(is_fake: bool) -> Label {
        if is_fake {
            Label::Fake
        } else {
            Label::Real
        }
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Real => Label::Fake,
            Label::Fake => Label::Real,
        }
    }

    /// Parses `"fake"`/`"real"` case-insensitively, or `"0"`/`"1"`.
    pub fn parse(s: &str) -> Option<Label> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("fake") || t == "1" {
            Some(Label::Fake)
        } else if t.eq_ignore_ascii_case("real") || t == "0" {
            Some(Label::Real)
        } else {
            None
        }
    }

    /// Capitalized form used in prompts ("Fake"/"Real").
    pub fn title(self) -> &'static str {
        match self {
            Label::Real => "Real",
            Label::Fake => "Fake",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

/// One article.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewsRecord {
    pub id: String,
    pub text: String,
    pub source: String,
    pub gold_label: Option<Label>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate record id {0:?}")]
    DuplicateId(String),
    #[error("source {name:?} has {have} records but {need} demonstrations were requested")]
    SourceTooSmall {
        name: String,
        have: usize,
        need: usize,
    },
    #[error("invalid split spec: {0}")]
    InvalidSpec(String),
    #[error("invalid synthetic corpus parameters: {0}")]
    InvalidSynth(String),
}

/// Reads a JSON Lines dataset; `source` is attached to every record.
pub fn load_jsonl(path: impl AsRef<Path>, source: &str) -> Result<Vec<NewsRecord>, CorpusError> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_jsonl(&content, source)
}

/// Parses JSON Lines content. Blank lines are skipped; line numbers are 1-based.
pub fn parse_jsonl(content: &str, source: &str) -> Result<Vec<NewsRecord>, CorpusError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_line(line, line_no, source)?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId(record.id));
        }
        records.push(record);
    }
    Ok(records)
}

fn parse_line(line: &str, line_no: usize, source: &str) -> Result<NewsRecord, CorpusError> {
    let malformed = |message: String| CorpusError::Malformed {
        line: line_no,
        message,
    };
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| malformed(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("expected a JSON object".into()))?;
    let id = match obj.get("id") {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(serde_json::Value::Number(n)) => n.to_string(),
        Some(_) => return Err(malformed("\"id\" must be a string".into())),
        None => return Err(malformed("missing \"id\"".into())),
    };
    let text = match obj.get("text") {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(_) => return Err(malformed("\"text\" must be a string".into())),
        None => return Err(malformed("missing \"text\"".into())),
    };
    if text.trim().is_empty() {
        return Err(malformed(format!("record {id:?} has empty text")));
    }
    let gold_label = match obj.get("label") {
        None | Some(serde_json::Value::Null) => None,
        Some(serde_json::Value::String(s)) => Some(
            Label::parse(s).ok_or_else(|| malformed(format!("unrecognized label {s:?}")))?,
        ),
        Some(serde_json::Value::Number(n)) => match n.as_u64() {
            Some(0) => Some(Label::Real),
            Some(1) => Some(Label::Fake),
            _ => return Err(malformed(format!("unrecognized label {n}"))),
        },
        Some(other) => return Err(malformed(format!("unrecognized label {other}"))),
    };
    Ok(NewsRecord {
        id,
        text,
        source: source.to_string(),
        gold_label,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    #[serde(default = "default_demo_per_source")]
    pub demo_per_source: usize,
    #[serde(default = "default_pool_frac")]
    pub pool_frac: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_demo_per_source() -> usize {
    100
}

fn default_pool_frac() -> f64 {
    0.75
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            demo_per_source: default_demo_per_source(),
            pool_frac: default_pool_frac(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub demo: Vec<NewsRecord>,
    pub pool: Vec<NewsRecord>,
    pub test: Vec<NewsRecord>,
}

/// Per source: draw the demonstration set first, then divide the remainder
/// into `floor(pool_frac * remainder)` pool records and the rest as test.
/// Output lists keep the input order.
pub fn split(records: &[NewsRecord], spec: &SplitSpec) -> Result<CorpusSplit, CorpusError> {
    if !(spec.pool_frac > 0.0 && spec.pool_frac < 1.0) {
        return Err(CorpusError::InvalidSpec(format!(
            "pool_frac must lie in (0, 1), got {}",
            spec.pool_frac
        )));
    }
    let mut seen = HashSet::new();
    let mut by_source: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if !seen.insert(r.id.as_str()) {
            return Err(CorpusError::DuplicateId(r.id.clone()));
        }
        by_source.entry(r.source.as_str()).or_default().push(i);
    }

    // 0 = demo, 1 = pool, 2 = test
    let mut role = vec![2u8; records.len()];
    for (source, indices) in &by_source {
        if indices.len() < spec.demo_per_source {
            return Err(CorpusError::SourceTooSmall {
                name: source.to_string(),
                have: indices.len(),
                need: spec.demo_per_source,
            });
        }
        let mut shuffled = indices.clone();
        let mut rng = derive_rng(spec.seed, &format!("split/{source}"), 0);
        shuffled.shuffle(&mut rng);
        let (demo, rest) = shuffled.split_at(spec.demo_per_source);
        let pool_n = (spec.pool_frac * rest.len() as f64 + 1e-9).floor() as usize;
        for &i in demo {
            role[i] = 0;
        }
        for &i in &rest[..pool_n] {
            role[i] = 1;
        }
    }

    let mut out = CorpusSplit::default();
    for (r, role) in records.iter().zip(role) {
        match role {
            0 => out.demo.push(r.clone()),
            1 => out.pool.push(r.clone()),
            _ => out.test.push(r.clone()),
        }
    }
    Ok(out)
}

const DOMAIN_NAMES: [&str; 8] = [
    "politics",
    "celebrity",
    "health",
    "science",
    "sports",
    "finance",
    "technology",
    "climate",
];

pub fn domain_name(j: usize) -> String {
    DOMAIN_NAMES
        .get(j)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("domain{j}"))
}

/// Parameters of the synthetic benchmark corpus.
///
/// Each record belongs to one latent domain (blob) and carries a latent
/// position `u` in [-1, 1]; its clean label is `fake` iff `u > 0`. Texts are
/// bags of tokens: domain topic words dominate (so embeddings cluster by
/// domain), and veracity cue words, drawn partly from a domain-specific
/// vocabulary, appear in proportion to `|u|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_topic_tokens")]
    pub topic_tokens: usize,
    #[serde(default = "default_max_cues")]
    pub max_cues: usize,
    #[serde(default = "default_domain_cue_prob")]
    pub domain_cue_prob: f64,
    /// Probability scale of an opposite-polarity cue near the decision boundary.
    #[serde(default = "default_ambiguity")]
    pub ambiguity: f64,
    #[serde(default = "default_filler_tokens")]
    pub filler_tokens: usize,
}

fn default_topic_tokens() -> usize {
    10
}
fn default_max_cues() -> usize {
    3
}
fn default_domain_cue_prob() -> f64 {
    0.6
}
fn default_ambiguity() -> f64 {
    0.0
}
fn default_filler_tokens() -> usize {
    3
}

impl SynthSpec {
    pub fn uniform(n_domains: usize, per_domain: usize, noise: f64, seed: u64) -> Self {
        SynthSpec {
            sizes: vec![per_domain; n_domains],
            noise,
            seed,
            topic_tokens: default_topic_tokens(),
            max_cues: default_max_cues(),
            domain_cue_prob: default_domain_cue_prob(),
            ambiguity: default_ambiguity(),
            filler_tokens: default_filler_tokens(),
        }
    }
}

/// A generated corpus together with its latent ground truth.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub records: Vec<NewsRecord>,
    pub domains: Vec<usize>,
    pub latent: Vec<f64>,
    pub clean_labels: Vec<Label>,
}

pub fn synth_corpus(
    n_domains: usize,
    per_domain: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<NewsRecord>, CorpusError> {
    Ok(synth_corpus_detailed(&SynthSpec::uniform(n_domains, per_domain, noise, seed))?.records)
}

pub fn synth_corpus_detailed(spec: &SynthSpec) -> Result<SynthCorpus, CorpusError> {
    if spec.sizes.len() < 2 {
        return Err(CorpusError::InvalidSynth("need at least 2 domains".into()));
    }
    if !(0.0..=0.5).contains(&spec.noise) {
        return Err(CorpusError::InvalidSynth(format!(
            "noise must lie in [0, 0.5], got {}",
            spec.noise
        )));
    }
    if spec.topic_tokens == 0 {
        return Err(CorpusError::InvalidSynth("topic_tokens must be positive".into()));
    }
    let mut out = SynthCorpus {
        records: Vec::new(),
        domains: Vec::new(),
        latent: Vec::new(),
        clean_labels: Vec::new(),
    };
    for (j, &size) in spec.sizes.iter().enumerate() {
        let name = domain_name(j);
        let mut rng = derive_rng(spec.seed, &format!("synth/{name}"), 0);
        for i in 0..size {
            let u: f64 = rng.random_range(-1.0..1.0);
            let clean = Label::from_bool(u > 0.0);
            let polarity = |label: Label| match label {
                Label::Fake => "fake",
                Label::Real => "real",
            };
            let mut tokens: Vec<String> = Vec::new();
            for t in 0..spec.topic_tokens {
                tokens.push(format!("{name}_topic{}", t % 4));
            }
            let n_cues = 1 + ((spec.max_cues as f64 - 1.0) * u.abs()).round() as usize;
            // The first cue is always domain-specific so every record carries
            // at least one token its own domain's class centroids weigh heavily.
            for c in 0..n_cues {
                let p = if c == 0 { 1.0 } else { spec.domain_cue_prob };
                tokens.push(cue_token(&mut rng, &name, polarity(clean), p));
            }
            if rng.random::<f64>() < spec.ambiguity * (1.0 - u.abs()) {
                tokens.push(cue_token(
                    &mut rng,
                    &name,
                    polarity(clean.flipped()),
                    spec.domain_cue_prob,
                ));
            }
            for _ in 0..spec.filler_tokens {
                tokens.push(format!("w{}", rng.random_range(0..150)));
            }
            tokens.shuffle(&mut rng);
            let gold = if rng.random::<f64>() < spec.noise {
                clean.flipped()
            } else {
                clean
            };
            out.records.push(NewsRecord {
                id: format!("{name}-{i:05}"),
                text: tokens.join(" "),
                source: name.clone(),
                gold_label: Some(gold),
            });
            out.domains.push(j);
            out.latent.push(u);
            out.clean_labels.push(clean);
        }
    }
    Ok(out)
}

fn cue_token(rng: &mut impl Rng, domain: &str, polarity: &str, domain_prob: f64) -> String {
    let k = rng.random_range(0..3);
    if rng.random::<f64>() < domain_prob {
        format!("{domain}_{polarity}{k}")
    } else {
        format!("{polarity}_cue{k}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn records(source: &str, n: usize) -> Vec<NewsRecord> {
        (0..n)
            .map(|i| NewsRecord {
                id: format!("{source}-{i}"),
                text: format!("text {i}"),
                source: source.into(),
                gold_label: Some(Label::from_bool(i % 2 == 0)),
            })
            .collect()
    }

    #[test]
    fn load_preserves_order_and_labels() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id": "a", "text": "one", "label": "FAKE"}}"#).unwrap();
        writeln!(f, r#"{{"id": "b", "text": "two", "label": 0}}"#).unwrap();
        writeln!(f, r#"{{"id": "c", "text": "three"}}"#).unwrap();
        let recs = load_jsonl(f.path(), "politifact").unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(
            recs.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
            ["a", "b", "c"]
        );
        assert_eq!(recs[0].gold_label, Some(Label::Fake));
        assert_eq!(recs[1].gold_label, Some(Label::Real));
        assert_eq!(recs[2].gold_label, None);
        assert!(recs.iter().all(|r| r.source == "politifact"));
    }

    #[test]
    fn empty_file_gives_empty_list() {
        let f = tempfile::NamedTempFile::new().unwrap();
        assert!(load_jsonl(f.path(), "x").unwrap().is_empty());
    }

    #[test]
    fn duplicate_id_is_named() {
        let err = parse_jsonl("{\"id\":\"z9\",\"text\":\"a\"}\n{\"id\":\"z9\",\"text\":\"b\"}\n", "s")
            .unwrap_err();
        assert!(matches!(&err, CorpusError::DuplicateId(id) if id == "z9"));
        assert!(err.to_string().contains("z9"));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_jsonl("{\"id\":\"a\",\"text\":\"x\"}\nnot json\n", "s").unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 2, .. }));
        let err = parse_jsonl("{\"id\":\"a\"}\n", "s").unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 1, .. }));
        let err = parse_jsonl("{\"id\":\"a\",\"text\":\"  \"}\n", "s").unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 1, .. }));
        let err = parse_jsonl("{\"id\":\"a\",\"text\":\"x\",\"label\":\"maybe\"}", "s").unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 1, .. }));
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_jsonl("/nonexistent/news.jsonl", "s").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/news.jsonl"));
    }

    #[test]
    fn split_sizes_follow_the_rule() {
        let recs = records("p", 500);
        let s = split(&recs, &SplitSpec { demo_per_source: 100, pool_frac: 0.75, seed: 3 }).unwrap();
        assert_eq!((s.demo.len(), s.pool.len(), s.test.len()), (100, 300, 100));
    }

    #[test]
    fn split_rounds_pool_down() {
        let recs = records("p", 111);
        let s = split(&recs, &SplitSpec { demo_per_source: 100, pool_frac: 0.75, seed: 0 }).unwrap();
        // remainder 11 -> floor(8.25) = 8 pool, 3 test
        assert_eq!((s.demo.len(), s.pool.len(), s.test.len()), (100, 8, 3));
    }

    #[test]
    fn split_is_deterministic_per_source() {
        let mut recs = records("a", 200);
        recs.extend(records("b", 150));
        let spec = SplitSpec { demo_per_source: 20, pool_frac: 0.75, seed: 11 };
        let s1 = split(&recs, &spec).unwrap();
        let s2 = split(&recs, &spec).unwrap();
        assert_eq!(s1, s2);
        let demo_a = s1.demo.iter().filter(|r| r.source == "a").count();
        assert_eq!(demo_a, 20);
        let other = split(&recs, &SplitSpec { seed: 12, ..spec }).unwrap();
        assert_ne!(s1.demo, other.demo);
    }

    #[test]
    fn split_rejects_small_source_and_bad_fraction() {
        let recs = records("tiny", 5);
        assert!(matches!(
            split(&recs, &SplitSpec { demo_per_source: 10, pool_frac: 0.75, seed: 0 }),
            Err(CorpusError::SourceTooSmall { have: 5, need: 10, .. })
        ));
        assert!(split(&recs, &SplitSpec { demo_per_source: 1, pool_frac: 1.0, seed: 0 }).is_err());
    }

    #[test]
    fn default_split_matches_published_setting() {
        let spec = SplitSpec::default();
        assert_eq!(spec.demo_per_source, 100);
        assert_eq!(spec.pool_frac, 0.75);
    }

    #[test]
    fn zero_noise_reproduces_latent_rule() {
        let c = synth_corpus_detailed(&SynthSpec::uniform(3, 100, 0.0, 7)).unwrap();
        assert_eq!(c.records.len(), 300);
        for (r, u) in c.records.iter().zip(&c.latent) {
            assert_eq!(r.gold_label, Some(Label::from_bool(*u > 0.0)));
        }
    }

    #[test]
    fn noise_flip_rate_is_close_to_target() {
        let c = synth_corpus_detailed(&SynthSpec::uniform(2, 500, 0.2, 5)).unwrap();
        let flips = c
            .records
            .iter()
            .zip(&c.clean_labels)
            .filter(|(r, clean)| r.gold_label != Some(**clean))
            .count();
        let rate = flips as f64 / c.records.len() as f64;
        assert!((rate - 0.2).abs() <= 0.03, "flip rate {rate}");
    }

    #[test]
    fn synth_rejects_bad_parameters() {
        assert!(synth_corpus(1, 10, 0.0, 0).is_err());
        assert!(synth_corpus(2, 10, 0.6, 0).is_err());
    }
}
